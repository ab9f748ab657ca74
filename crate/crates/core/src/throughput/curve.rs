use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_PADDING_WINDOW: u32 = 64;

/// Sampled accelerator utilization `U(h)` at generation batch size `h`.
///
/// Between samples the curve is piecewise linear. Below the first sample it
/// extrapolates linearly through the origin; above the last it stays flat.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilizationCurve {
    samples: Vec<(u32, f64)>,
    pub padding_window: u32,
}

#[derive(Debug, Serialize, Deserialize)]
struct CurveRow {
    h: u32,
    utilization: f64,
}

impl UtilizationCurve {
    pub fn new(samples: Vec<(u32, f64)>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("utilization curve has no samples"));
        }
        if samples.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::invalid("curve batch sizes must be strictly increasing"));
        }
        if samples[0].0 == 0 {
            return Err(Error::invalid("curve batch sizes must be positive"));
        }
        if samples.iter().any(|&(_, u)| !(u > 0.0 && u <= 1.0)) {
            return Err(Error::invalid("utilizations must lie in (0, 1]"));
        }
        Ok(UtilizationCurve {
            samples,
            padding_window: DEFAULT_PADDING_WINDOW,
        })
    }

    pub fn with_padding_window(mut self, window: u32) -> Self {
        self.padding_window = window;
        self
    }

    /// Constant utilization `u` at every batch size.
    pub fn constant(u: f64) -> Result<Self> {
        Self::new(vec![(1, u)]).map(|mut c| {
            // A single sample would extrapolate through the origin below h = 1,
            // which never matters for integer batch sizes but does for the
            // fractional per-accelerator loads of the conventional model.
            c.samples.insert(0, (0, u));
            c
        })
    }

    /// Parse a two-column `h,utilization` CSV with a header row.
    pub fn from_csv_reader<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.len() != 2 || &headers[0] != "h" || &headers[1] != "utilization" {
            return Err(Error::invalid(format!(
                "curve header must be `h,utilization`, found `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut samples = Vec::new();
        for row in rdr.deserialize::<CurveRow>() {
            let row = row?;
            samples.push((row.h, row.utilization));
        }
        Self::new(samples)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|source| Error::File {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_csv_reader(file)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for &(h, utilization) in self.samples.iter().filter(|s| s.0 > 0) {
            w.serialize(CurveRow { h, utilization }).expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf8 csv")
    }

    pub fn samples(&self) -> &[(u32, f64)] {
        &self.samples
    }

    /// Largest sampled batch size.
    pub fn last_batch_size(&self) -> u32 {
        self.samples.last().expect("nonempty").0
    }

    /// Interpolated utilization without padding.
    pub fn raw(&self, h: f64) -> f64 {
        let (h0, u0) = self.samples[0];
        if h <= h0 as f64 {
            if h0 == 0 {
                return u0;
            }
            return u0 * h / h0 as f64;
        }
        let &(hn, un) = self.samples.last().expect("nonempty");
        if h >= hn as f64 {
            return un;
        }
        let i = self.samples.partition_point(|&(s, _)| (s as f64) <= h);
        let (ha, ua) = self.samples[i - 1];
        let (hb, ub) = self.samples[i];
        let frac = (h - ha as f64) / (hb - ha) as f64;
        ua + frac * (ub - ua)
    }

    /// `U(h)`. With `use_padding`, the batch may be padded to any integer
    /// `h'` in `[h, h + padding_window]`; only the `h / h'` useful share of a
    /// padded batch counts, and the best option (including no padding) wins.
    pub fn utilization(&self, h: f64, use_padding: bool) -> Result<f64> {
        if !(h > 0.0) || !h.is_finite() {
            return Err(Error::invalid(format!("batch size must be positive, got {h}")));
        }
        let mut best = self.raw(h);
        if use_padding {
            let lo = h.ceil() as u64;
            let hi = (h + self.padding_window as f64).floor() as u64;
            for padded in lo..=hi {
                let p = padded as f64;
                best = best.max(h / p * self.raw(p));
            }
        }
        Ok(best)
    }
}

/// Hardware-neutral time unit: FLOPs of one token forward pass over the
/// accelerator's peak FLOP rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlashScale {
    pub f_gen_flops: f64,
    pub peak_flops: f64,
}

impl FlashScale {
    pub fn new(f_gen_flops: f64, peak_flops: f64) -> Result<Self> {
        if !(f_gen_flops > 0.0) || !(peak_flops > 0.0) {
            return Err(Error::invalid("F_gen and M must be strictly positive"));
        }
        Ok(FlashScale {
            f_gen_flops,
            peak_flops,
        })
    }
}

/// Seconds per flash, `F_gen / M`.
pub fn flash_seconds(scale: &FlashScale) -> f64 {
    scale.f_gen_flops / scale.peak_flops
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn two_point() -> UtilizationCurve {
        UtilizationCurve::new(vec![(100, 0.2), (200, 0.4)]).unwrap()
    }

    #[test]
    fn interpolation_and_clamping() {
        let c = two_point();
        assert_relative_eq!(c.utilization(150.0, false).unwrap(), 0.3, epsilon = 1e-15);
        assert_eq!(c.utilization(1000.0, false).unwrap(), 0.4);
        assert_relative_eq!(c.utilization(50.0, false).unwrap(), 0.1, epsilon = 1e-15);
        assert!(c.utilization(0.0, false).is_err());
    }

    #[test]
    fn padding_uses_faster_batch() {
        let c = UtilizationCurve::new(vec![(100, 0.20), (127, 0.20), (128, 0.30), (200, 0.31)]).unwrap();
        let padded = c.utilization(100.0, true).unwrap();
        assert!(padded >= 100.0 / 128.0 * 0.30 - 1e-15);
        assert!(padded >= c.utilization(100.0, false).unwrap());
    }

    #[test]
    fn rejects_bad_curves() {
        assert!(UtilizationCurve::new(vec![]).is_err());
        assert!(UtilizationCurve::new(vec![(2, 0.1), (2, 0.2)]).is_err());
        assert!(UtilizationCurve::new(vec![(2, 1.5)]).is_err());
        assert!(UtilizationCurve::from_csv_reader("x,y\n1,0.5\n".as_bytes()).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let c = UtilizationCurve::from_csv_reader("h,utilization\n8,0.016\n200,0.4\n".as_bytes()).unwrap();
        assert_eq!(c.samples(), &[(8, 0.016), (200, 0.4)]);
        assert_eq!(UtilizationCurve::from_csv_reader(c.to_csv().as_bytes()).unwrap(), c);
    }

    #[test]
    fn flash_examples() {
        assert_eq!(flash_seconds(&FlashScale::new(1e15, 1e15).unwrap()), 1.0);
        assert_relative_eq!(flash_seconds(&FlashScale::new(2e9, 1e15).unwrap()), 2e-6);
        let a = flash_seconds(&FlashScale::new(3.0, 5.0).unwrap());
        let b = flash_seconds(&FlashScale::new(3.0, 10.0).unwrap());
        assert_relative_eq!(b, a / 2.0);
        assert!(FlashScale::new(0.0, 1.0).is_err());
    }
}
