use serde::{Deserialize, Serialize};

use super::RobotError;

/// Log-distance path loss: `rssi(d) = p0 - 10 n log10(d / d0)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RssiModel {
    /// Received power at the reference distance, dBm.
    pub p0_dbm: f64,
    /// Reference distance, mm.
    pub d0_mm: f64,
    /// Path loss exponent.
    pub n: f64,
}

impl Default for RssiModel {
    fn default() -> Self {
        RssiModel { p0_dbm: -45.0, d0_mm: 1000.0, n: 2.5 }
    }
}

impl RssiModel {
    pub fn rssi(&self, distance_mm: f64) -> Result<f64, RobotError> {
        if distance_mm.is_nan() || distance_mm <= 0.0 {
            return Err(RobotError::NonpositiveDistance(distance_mm));
        }
        Ok(self.p0_dbm - 10.0 * self.n * (distance_mm / self.d0_mm).log10())
    }

    /// The distance at which the model yields exactly `rssi_dbm`.
    pub fn distance_for(&self, rssi_dbm: f64) -> f64 {
        self.d0_mm * 10f64.powf((self.p0_dbm - rssi_dbm) / (10.0 * self.n))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn anchor_and_decade() {
        let m = RssiModel::default();
        assert_eq!(m.rssi(1000.0).unwrap(), -45.0);
        assert_eq!(m.rssi(10_000.0).unwrap(), -70.0);
    }

    #[test]
    fn threshold_distance_for_defaults() {
        assert_eq!(RssiModel::default().distance_for(-70.0), 10_000.0);
        // half a metre is well inside the threshold
        assert!(RssiModel::default().rssi(500.0).unwrap() > -70.0);
    }

    #[test]
    fn nonpositive_distance_rejected() {
        let m = RssiModel::default();
        assert_eq!(m.rssi(0.0), Err(RobotError::NonpositiveDistance(0.0)));
        assert!(m.rssi(-3.0).is_err());
        assert!(m.rssi(f64::NAN).is_err());
    }

    proptest! {
        #[test]
        fn strictly_decreasing(a in 1e-3f64..1e7, b in 1e-3f64..1e7) {
            prop_assume!(a < b * (1.0 - 1e-9));
            let m = RssiModel::default();
            prop_assert!(m.rssi(a).unwrap() > m.rssi(b).unwrap());
        }

        #[test]
        fn distance_for_inverts_rssi(d in 1.0f64..1e6) {
            let m = RssiModel::default();
            let back = m.distance_for(m.rssi(d).unwrap());
            prop_assert!((back - d).abs() / d < 1e-9);
        }
    }
}
