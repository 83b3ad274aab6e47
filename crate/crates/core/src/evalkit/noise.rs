use std::fmt;
use std::str::FromStr;

use crate::attention::RelevanceMap;
use crate::error::{Error, Result};
use crate::merge::mean_normalized;
use crate::numkit::Grid2D;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseStrategy {
    Uniform,
    Weighted,
}

impl fmt::Display for NoiseStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NoiseStrategy::Uniform => "uniform",
            NoiseStrategy::Weighted => "weighted",
        })
    }
}

impl FromStr for NoiseStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(NoiseStrategy::Uniform),
            "weighted" => Ok(NoiseStrategy::Weighted),
            _ => Err(Error::config(format!(
                "noise strategy must be uniform|weighted, got {s:?}"
            ))),
        }
    }
}

/// Adds `eps` to `Z_text`, either everywhere or reweighted per position by
/// `map / mean(map)` and rescaled back to the Frobenius norm of `eps`.
pub fn inject_noise(
    z_text: &Grid2D,
    eps: &Grid2D,
    strategy: NoiseStrategy,
    map: Option<&RelevanceMap>,
) -> Result<Grid2D> {
    let noise = match strategy {
        NoiseStrategy::Uniform => eps.clone(),
        NoiseStrategy::Weighted => {
            let map = map.ok_or_else(|| Error::argument("weighted noise needs a relevance map"))?;
            if map.len() != eps.rows() {
                return Err(Error::Shape {
                    op: "inject_noise map",
                    left: eps.shape(),
                    right: (map.len(), 1),
                });
            }
            let w = mean_normalized(&map.values)?;
            let weighted = eps.scale_rows(&w)?;
            let (target, got) = (eps.norm(), weighted.norm());
            if got > 0.0 {
                weighted.scale(target / got)
            } else {
                weighted
            }
        }
    };
    z_text.add(&noise)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::Rng;

    #[test]
    fn uniform_map_matches_uniform_strategy() {
        let mut rng = Rng::new(1);
        let z = rng.normal_grid(6, 3);
        let e = rng.normal_grid(6, 3);
        let u = inject_noise(&z, &e, NoiseStrategy::Uniform, None).unwrap();
        let w = inject_noise(
            &z,
            &e,
            NoiseStrategy::Weighted,
            Some(&RelevanceMap::uniform(6)),
        )
        .unwrap();
        assert!(u.bit_eq(&w));
    }

    #[test]
    fn zero_noise_is_identity() {
        let mut rng = Rng::new(2);
        let z = rng.normal_grid(4, 2);
        let e = Grid2D::zeros(4, 2);
        let m = RelevanceMap::new(vec![0.1, 0.2, 0.3, 0.4]);
        for s in [NoiseStrategy::Uniform, NoiseStrategy::Weighted] {
            assert!(inject_noise(&z, &e, s, Some(&m)).unwrap().bit_eq(&z));
        }
    }

    #[test]
    fn equal_norm_deltas() {
        let mut rng = Rng::new(3);
        let z = rng.normal_grid(5, 4);
        let e = rng.normal_grid(5, 4);
        let m = RelevanceMap::new(vec![0.5, 0.05, 0.05, 0.3, 0.1]);
        let u = inject_noise(&z, &e, NoiseStrategy::Uniform, None).unwrap();
        let w = inject_noise(&z, &e, NoiseStrategy::Weighted, Some(&m)).unwrap();
        let du = u.sub(&z).unwrap().norm();
        let dw = w.sub(&z).unwrap().norm();
        assert!((du - dw).abs() < 1e-9);
        assert!(w.max_abs_diff(&u) > 1e-3);
    }

    #[test]
    fn degenerate_and_missing_maps() {
        let z = Grid2D::zeros(2, 2);
        let e = Grid2D::filled(2, 2, 1.0);
        let zero = RelevanceMap::new(vec![0.0, 0.0]);
        assert!(matches!(
            inject_noise(&z, &e, NoiseStrategy::Weighted, Some(&zero)),
            Err(Error::DegenerateMap { .. })
        ));
        assert!(inject_noise(&z, &e, NoiseStrategy::Weighted, None).is_err());
    }
}
