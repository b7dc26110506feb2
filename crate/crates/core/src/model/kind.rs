use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Measured quantity carried by a series. Each kind has a fixed unit and
/// validity range; ingestion rejects anything outside it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensorKind {
    PowerW,
    EnergyKwh,
    TemperatureC,
    HumidityPct,
    NoiseDb,
    ActivityCount,
    LuminosityLux,
    LightState,
    OccupancyCount,
    ComfortThermal,
    ComfortLuminosity,
    FuelConsumptionL,
}

/// How the values of a kind are combined when no aggregate is requested.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Nature {
    /// Quantity accumulated over an interval (energy, fuel): buckets add up.
    Extensive,
    /// Instantaneous level (power, temperature): buckets average.
    Intensive,
}

impl SensorKind {
    pub const ALL: [SensorKind; 12] = [
        SensorKind::PowerW,
        SensorKind::EnergyKwh,
        SensorKind::TemperatureC,
        SensorKind::HumidityPct,
        SensorKind::NoiseDb,
        SensorKind::ActivityCount,
        SensorKind::LuminosityLux,
        SensorKind::LightState,
        SensorKind::OccupancyCount,
        SensorKind::ComfortThermal,
        SensorKind::ComfortLuminosity,
        SensorKind::FuelConsumptionL,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SensorKind::PowerW => "power_w",
            SensorKind::EnergyKwh => "energy_kwh",
            SensorKind::TemperatureC => "temperature_c",
            SensorKind::HumidityPct => "humidity_pct",
            SensorKind::NoiseDb => "noise_db",
            SensorKind::ActivityCount => "activity_count",
            SensorKind::LuminosityLux => "luminosity_lux",
            SensorKind::LightState => "light_state",
            SensorKind::OccupancyCount => "occupancy_count",
            SensorKind::ComfortThermal => "comfort_thermal",
            SensorKind::ComfortLuminosity => "comfort_luminosity",
            SensorKind::FuelConsumptionL => "fuel_consumption_l",
        }
    }

    pub fn unit(self) -> &'static str {
        match self {
            SensorKind::PowerW => "W",
            SensorKind::EnergyKwh => "kWh",
            SensorKind::TemperatureC => "°C",
            SensorKind::HumidityPct => "%",
            SensorKind::NoiseDb => "dB",
            SensorKind::ActivityCount => "events",
            SensorKind::LuminosityLux => "lx",
            SensorKind::LightState => "on/off",
            SensorKind::OccupancyCount => "persons",
            SensorKind::ComfortThermal | SensorKind::ComfortLuminosity => "vote",
            SensorKind::FuelConsumptionL => "L",
        }
    }

    /// Inclusive validity range.
    pub fn range(self) -> (f64, f64) {
        match self {
            SensorKind::PowerW
            | SensorKind::EnergyKwh
            | SensorKind::ActivityCount
            | SensorKind::LuminosityLux
            | SensorKind::OccupancyCount
            | SensorKind::FuelConsumptionL => (0.0, f64::MAX),
            SensorKind::TemperatureC => (-60.0, 100.0),
            SensorKind::HumidityPct => (0.0, 100.0),
            SensorKind::NoiseDb => (0.0, 200.0),
            SensorKind::LightState => (0.0, 1.0),
            SensorKind::ComfortThermal | SensorKind::ComfortLuminosity => (1.0, 5.0),
        }
    }

    /// Kinds whose values must be whole numbers.
    pub fn is_integral(self) -> bool {
        matches!(
            self,
            SensorKind::ActivityCount
                | SensorKind::LightState
                | SensorKind::OccupancyCount
                | SensorKind::ComfortThermal
                | SensorKind::ComfortLuminosity
        )
    }

    pub fn is_comfort_vote(self) -> bool {
        matches!(self, SensorKind::ComfortThermal | SensorKind::ComfortLuminosity)
    }

    pub fn nature(self) -> Nature {
        match self {
            SensorKind::EnergyKwh | SensorKind::FuelConsumptionL => Nature::Extensive,
            _ => Nature::Intensive,
        }
    }

    /// Checks `value` against the kind's range and integrality. The error
    /// string is meant for API consumers.
    pub fn validate(self, value: f64) -> Result<(), String> {
        if !value.is_finite() {
            return Err(format!("{self} value must be finite"));
        }
        let (lo, hi) = self.range();
        if value < lo || value > hi {
            return Err(if hi == f64::MAX {
                format!("{self} value {value} below minimum {lo}")
            } else {
                format!("{self} value {value} outside {lo}..={hi}")
            });
        }
        if self.is_integral() && value.fract() != 0.0 {
            return Err(format!("{self} value {value} must be an integer"));
        }
        Ok(())
    }
}

impl fmt::Display for SensorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown sensor kind `{0}`")]
pub struct UnknownKind(pub String);

impl FromStr for SensorKind {
    type Err = UnknownKind;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SensorKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| UnknownKind(s.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for kind in SensorKind::ALL {
            assert_eq!(kind.as_str().parse::<SensorKind>().unwrap(), kind);
            let json = serde_json::to_string(&kind).unwrap();
            assert_eq!(json, format!("\"{}\"", kind.as_str()));
        }
        assert!("watts".parse::<SensorKind>().is_err());
    }

    #[test]
    fn ranges() {
        assert!(SensorKind::HumidityPct.validate(100.0).is_ok());
        assert!(SensorKind::HumidityPct.validate(140.0).is_err());
        assert!(SensorKind::HumidityPct.validate(-0.1).is_err());
        assert!(SensorKind::LightState.validate(1.0).is_ok());
        assert!(SensorKind::LightState.validate(0.5).is_err());
        assert!(SensorKind::LightState.validate(2.0).is_err());
        assert!(SensorKind::ComfortThermal.validate(4.0).is_ok());
        assert!(SensorKind::ComfortThermal.validate(0.0).is_err());
        assert!(SensorKind::ComfortLuminosity.validate(3.5).is_err());
        assert!(SensorKind::TemperatureC.validate(f64::NAN).is_err());
        assert!(SensorKind::TemperatureC.validate(-12.5).is_ok());
        assert!(SensorKind::PowerW.validate(-1.0).is_err());
    }
}
