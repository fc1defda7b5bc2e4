//! Parametric image corruptions at five severity levels.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    ImpulseNoise,
    Contrast,
    Brightness,
    BoxBlur,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 5] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ImpulseNoise,
        CorruptionKind::Contrast,
        CorruptionKind::Brightness,
        CorruptionKind::BoxBlur,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ImpulseNoise => "impulse_noise",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::BoxBlur => "box_blur",
        }
    }

    /// Parameter for severities 1 to 5: noise σ, impulse fraction,
    /// contrast factor, brightness shift, or number of blur passes.
    pub fn table(self) -> [f64; 5] {
        match self {
            CorruptionKind::GaussianNoise => [0.02, 0.04, 0.08, 0.12, 0.18],
            CorruptionKind::ImpulseNoise => [0.01, 0.03, 0.06, 0.1, 0.17],
            CorruptionKind::Contrast => [0.9, 0.75, 0.6, 0.45, 0.3],
            CorruptionKind::Brightness => [0.05, 0.1, 0.15, 0.2, 0.3],
            CorruptionKind::BoxBlur => [1.0, 2.0, 3.0, 4.0, 5.0],
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| Error::InvalidArgument(format!("unknown corruption kind `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
    #[serde(default)]
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn validate(&self) -> Result<()> {
        if !(1..=5).contains(&self.severity) {
            return Err(Error::InvalidArgument(format!("severity must be in 1..=5, got {}", self.severity)));
        }
        Ok(())
    }

    pub fn parameter(&self) -> Result<f64> {
        self.validate()?;
        Ok(self.kind.table()[usize::from(self.severity) - 1])
    }
}

pub fn corrupt(x: &Tensor, spec: &CorruptionSpec) -> Result<Tensor> {
    corrupt_with_parameter(x, spec.kind, spec.parameter()?, spec.seed)
}

/// Applies `kind` with an explicit parameter instead of a severity level.
pub fn corrupt_with_parameter(x: &Tensor, kind: CorruptionKind, param: f64, seed: u64) -> Result<Tensor> {
    if x.is_empty() {
        return Err(Error::Empty("image"));
    }
    let mut r = rng::stream(rng::derive(seed, kind.name()));
    let out = match kind {
        CorruptionKind::GaussianNoise => {
            if param == 0.0 {
                x.clone()
            } else {
                let n = Normal::new(0.0, param).map_err(|e| Error::InvalidArgument(e.to_string()))?;
                x.map(|v| v + n.sample(&mut r))
            }
        }
        CorruptionKind::ImpulseNoise => x.map(|v| {
            if r.random::<f64>() < param {
                if r.random::<bool>() {
                    1.0
                } else {
                    0.0
                }
            } else {
                v
            }
        }),
        CorruptionKind::Contrast => {
            let m = x.mean();
            x.map(|v| m + param * (v - m))
        }
        CorruptionKind::Brightness => x.map(|v| v + param),
        CorruptionKind::BoxBlur => {
            let mut y = x.clone();
            for _ in 0..param.round() as usize {
                y = box_blur(&y)?;
            }
            y
        }
    };
    Ok(out.map(|v| v.clamp(0.0, 1.0)))
}

/// One 3×3 box pass over a square image, edges mirrored (the border pixel
/// is repeated), which keeps the pixel mean.
pub fn box_blur(x: &Tensor) -> Result<Tensor> {
    let n = x.len();
    let side = (n as f64).sqrt().round() as usize;
    if side * side != n {
        return Err(Error::InvalidShape(format!("{n} pixels do not form a square image")));
    }
    let at = |i: isize| -> usize {
        if i < 0 {
            (-i - 1) as usize
        } else if i as usize >= side {
            2 * side - 1 - i as usize
        } else {
            i as usize
        }
    };
    let src = x.data();
    let mut rows = vec![0.0; n];
    for r in 0..side {
        for c in 0..side {
            let c = c as isize;
            rows[r * side + c as usize] = (-1..=1).map(|d| src[r * side + at(c + d)]).sum::<f64>() / 3.0;
        }
    }
    let mut out = vec![0.0; n];
    for r in 0..side {
        for c in 0..side {
            let ri = r as isize;
            out[r * side + c] = (-1..=1).map(|d| rows[at(ri + d) * side + c]).sum::<f64>() / 3.0;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> Tensor {
        Tensor::vector((0..64).map(|i| i as f64 / 63.0).collect())
    }

    #[test]
    fn zero_strength_is_identity() {
        let x = ramp();
        assert_eq!(corrupt_with_parameter(&x, CorruptionKind::GaussianNoise, 0.0, 1).unwrap(), x);
        assert_eq!(corrupt_with_parameter(&x, CorruptionKind::Contrast, 1.0, 1).unwrap(), x);
        assert_eq!(corrupt_with_parameter(&x, CorruptionKind::BoxBlur, 0.0, 1).unwrap(), x);
    }

    #[test]
    fn brightness_top_severity() {
        let x = Tensor::filled(&[64], 0.5);
        let spec = CorruptionSpec { kind: CorruptionKind::Brightness, severity: 5, seed: 0 };
        let y = corrupt(&x, &spec).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.8).abs() < 1e-12));
    }

    #[test]
    fn blur_keeps_mean() {
        let x = ramp().map(|v| (v * 7.3).sin().abs());
        for passes in 1..=5 {
            let y = corrupt_with_parameter(&x, CorruptionKind::BoxBlur, passes as f64, 0).unwrap();
            assert!((y.mean() - x.mean()).abs() < 1e-9);
        }
    }

    #[test]
    fn blur_of_constant_is_constant() {
        let x = Tensor::filled(&[64], 0.3);
        assert!(box_blur(&x).unwrap().data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
    }

    #[test]
    fn blur_rejects_non_square() {
        assert!(box_blur(&Tensor::zeros(&[10])).is_err());
    }

    #[test]
    fn seeds_reproduce() {
        let x = ramp();
        for kind in CorruptionKind::ALL {
            let spec = CorruptionSpec { kind, severity: 3, seed: 9 };
            assert_eq!(corrupt(&x, &spec).unwrap(), corrupt(&x, &spec).unwrap());
        }
    }

    #[test]
    fn severity_bounds_and_names() {
        let bad = CorruptionSpec { kind: CorruptionKind::Contrast, severity: 0, seed: 0 };
        assert!(corrupt(&ramp(), &bad).is_err());
        assert!(corrupt(&ramp(), &CorruptionSpec { severity: 6, ..bad }).is_err());
        assert_eq!("box_blur".parse::<CorruptionKind>().unwrap(), CorruptionKind::BoxBlur);
        assert!("snow".parse::<CorruptionKind>().is_err());
        assert!(serde_json::from_str::<CorruptionKind>("\"fog\"").is_err());
    }
}
