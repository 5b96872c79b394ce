use crate::error::{Error, Result};
use crate::optim::SolverConfig;
use crate::tensor::Tensor;

/// The ordered model outputs recorded while one sample is overfitted.
#[derive(Clone, Debug, PartialEq)]
pub struct EvolutionCube {
    pub sample_id: u64,
    /// One output per step, all of the model's output shape.
    pub slices: Vec<Tensor>,
    /// Slices before this index were recorded during the support phase.
    pub phase_boundary: usize,
    pub checkpoint_hash: [u8; 32],
    pub support_solver: SolverConfig,
    pub selfish_solver: SolverConfig,
}

impl EvolutionCube {
    pub fn depth(&self) -> usize {
        self.slices.len()
    }

    pub fn slice_shape(&self) -> &[usize] {
        self.slices.first().map(|s| s.shape()).unwrap_or(&[])
    }

    pub fn validate(&self) -> Result<()> {
        if self.phase_boundary > self.slices.len() {
            return Err(Error::Dimension(format!(
                "phase boundary {} beyond {} slices",
                self.phase_boundary,
                self.slices.len()
            )));
        }
        let shape = self.slice_shape();
        if self.slices.iter().any(|s| s.shape() != shape) {
            return Err(Error::Dimension("cube slices differ in shape".into()));
        }
        Ok(())
    }

    /// Slices stacked along a new leading axis, `[T, ...slice]`.
    pub fn stacked(&self) -> Result<Tensor> {
        let refs: Vec<&Tensor> = self.slices.iter().collect();
        Tensor::stack(&refs)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Downsample {
    Stride(usize),
    Depth(usize),
}

/// Keeps every `stride`-th slice counting back from the last one, so the
/// final state always survives. A target depth maps to `stride = T / depth`.
pub fn downsample_cube(cube: &EvolutionCube, how: Downsample) -> Result<EvolutionCube> {
    let t = cube.depth();
    let (stride, depth) = match how {
        Downsample::Stride(s) => {
            if s == 0 {
                return Err(Error::Argument("stride must be positive".into()));
            }
            if t == 0 {
                return Err(Error::Argument("cannot down-sample an empty cube".into()));
            }
            (s, (t - 1) / s + 1)
        }
        Downsample::Depth(d) => {
            if d < 2 {
                return Err(Error::Argument(format!("target depth {d} is below 2")));
            }
            if d > t {
                return Err(Error::Argument(format!(
                    "target depth {d} exceeds cube depth {t}"
                )));
            }
            (t / d, d)
        }
    };
    let indices: Vec<usize> = (0..depth).map(|j| t - 1 - stride * (depth - 1 - j)).collect();
    Ok(EvolutionCube {
        sample_id: cube.sample_id,
        slices: indices.iter().map(|&i| cube.slices[i].clone()).collect(),
        phase_boundary: indices.iter().filter(|&&i| i < cube.phase_boundary).count(),
        checkpoint_hash: cube.checkpoint_hash,
        support_solver: cube.support_solver,
        selfish_solver: cube.selfish_solver,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cube(t: usize, boundary: usize) -> EvolutionCube {
        EvolutionCube {
            sample_id: 3,
            slices: (0..t).map(|i| Tensor::full(&[2], i as f64)).collect(),
            phase_boundary: boundary,
            checkpoint_hash: [0; 32],
            support_solver: SolverConfig::SUPPORT,
            selfish_solver: SolverConfig::SELFISH,
        }
    }

    #[test]
    fn sixty_to_fifteen_at_stride_four() {
        let c = cube(60, 30);
        let d = downsample_cube(&c, Downsample::Depth(15)).unwrap();
        assert_eq!(d.depth(), 15);
        let kept: Vec<f64> = d.slices.iter().map(|s| s.data()[0]).collect();
        assert_eq!(kept, (0..15).map(|j| (3 + 4 * j) as f64).collect::<Vec<_>>());
        assert_eq!(d.slices.last(), c.slices.last());
        // kept indices 3, 7, ..., 27 precede the boundary at 30
        assert_eq!(d.phase_boundary, 7);
        assert_eq!(downsample_cube(&c, Downsample::Stride(4)).unwrap(), d);
    }

    #[test]
    fn stride_one_is_identity() {
        let c = cube(9, 4);
        assert_eq!(downsample_cube(&c, Downsample::Stride(1)).unwrap(), c);
        assert_eq!(downsample_cube(&c, Downsample::Depth(9)).unwrap(), c);
    }

    #[test]
    fn rejects_bad_depths() {
        let c = cube(10, 0);
        assert!(downsample_cube(&c, Downsample::Depth(1)).is_err());
        assert!(downsample_cube(&c, Downsample::Depth(11)).is_err());
    }

    #[test]
    fn last_slice_always_kept() {
        for t in 2..40 {
            for d in 2..=t {
                let c = cube(t, t / 2);
                let out = downsample_cube(&c, Downsample::Depth(d)).unwrap();
                assert_eq!(out.depth(), d);
                assert_eq!(out.slices.last(), c.slices.last());
                assert!(out.phase_boundary <= d);
            }
        }
    }
}
