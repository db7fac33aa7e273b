//! Similarity losses, regularization, deep supervision and evaluation
//! metrics.

mod loss;
mod metrics;

pub use loss::{
    box_sum, deep_supervised_loss, level_weights, mse_loss, ncc_loss, smoothness,
    soft_dice_loss, LabelPair, LossTerms,
};
pub use metrics::{
    boundary_mask, dice_metric, distance_transform, hd95, hd95_report, percentile, tre,
    DiceReport,
};

use crate::autodiff::Tensor;
use crate::deform::Deformation;
use crate::error::{Error, Result};
use crate::grid::GridSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Similarity {
    Ncc,
    Mse,
}

impl std::str::FromStr for Similarity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ncc" => Ok(Similarity::Ncc),
            "mse" => Ok(Similarity::Mse),
            _ => Err(Error::Config(format!("unknown similarity '{s}' (ncc|mse)"))),
        }
    }
}

impl std::fmt::Display for Similarity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Similarity::Ncc => "ncc",
            Similarity::Mse => "mse",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub similarity: Similarity,
    /// Odd local-correlation window per axis.
    pub ncc_window: usize,
    pub lambda: f64,
    /// Weight of the level-1 soft Dice term; 0 disables it.
    pub dice_weight: f64,
    pub levels: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            similarity: Similarity::Ncc,
            ncc_window: 9,
            lambda: 1.0,
            dice_weight: 0.0,
            levels: 5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ncc_window == 0 || self.ncc_window.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "loss.ncc_window must be odd and positive, got {}",
                self.ncc_window
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("loss.lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.dice_weight >= 0.0 && self.dice_weight.is_finite()) {
            return Err(Error::Config(format!(
                "loss.dice_weight must be >= 0, got {}",
                self.dice_weight
            )));
        }
        if self.levels == 0 {
            return Err(Error::Config("loss.levels must be >= 1".into()));
        }
        Ok(())
    }
}

/// Integer label per voxel; 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    grid: GridSpec,
    labels: Vec<u16>,
}

impl LabelMap {
    pub fn new(grid: GridSpec, labels: Vec<u16>) -> Result<Self> {
        if labels.len() != grid.voxel_count() {
            return Err(Error::Shape(format!(
                "label map: {} labels on {:?}",
                labels.len(),
                grid.dims()
            )));
        }
        Ok(Self { grid, labels })
    }

    pub fn from_fn(grid: GridSpec, f: impl FnMut([usize; 3]) -> u16) -> Self {
        let labels = grid.vol().iter_coords().map(f).collect();
        Self { grid, labels }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    /// Sorted distinct non-zero labels.
    pub fn foreground_labels(&self) -> Vec<u16> {
        let mut seen: Vec<u16> = self.labels.iter().copied().filter(|&l| l != 0).collect();
        seen.sort_unstable();
        seen.dedup();
        seen
    }

    pub fn count(&self, label: u16) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    /// `[L, spatial..]` indicator channels for `labels`, in the given order.
    pub fn one_hot(&self, labels: &[u16]) -> Result<Tensor> {
        let n = self.labels.len();
        let mut data = vec![0.0; labels.len() * n];
        for (c, &l) in labels.iter().enumerate() {
            for (d, &v) in data[c * n..(c + 1) * n].iter_mut().zip(&self.labels) {
                if v == l {
                    *d = 1.0;
                }
            }
        }
        let mut shape = vec![labels.len()];
        shape.extend(self.grid.dims().iter().rev());
        Tensor::new(shape, data)
    }

    /// Nearest-neighbour backward warp through `phi`, clamped to the grid.
    pub fn warp_nearest(&self, phi: &Deformation) -> Result<LabelMap> {
        self.grid.check_same(phi.grid(), "label warp")?;
        let vol = self.grid.vol();
        let ext = vol.extents();
        let n = vol.len();
        let u = phi.displacement().values();
        let labels = vol
            .iter_coords()
            .enumerate()
            .map(|(i, p)| {
                let mut q = [0usize; 3];
                for a in 0..vol.ndim {
                    let c = (p[a] as f64 + u[a * n + i]).round();
                    q[a] = c.clamp(0.0, (ext[a] - 1) as f64) as usize;
                }
                self.labels[vol.index(q[0], q[1], q[2])]
            })
            .collect();
        Ok(LabelMap {
            grid: self.grid.clone(),
            labels,
        })
    }
}

/// Ordered physical-space points (mm), one per landmark.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LandmarkSet {
    points: Vec<Vec<f64>>,
}

impl LandmarkSet {
    pub fn new(points: Vec<Vec<f64>>) -> Result<Self> {
        if let Some(first) = points.first() {
            let d = first.len();
            if !(2..=3).contains(&d) {
                return Err(Error::InvalidArgument(format!("landmarks must be 2D or 3D, got {d}D")));
            }
            if points.iter().any(|p| p.len() != d) {
                return Err(Error::InvalidArgument("landmarks of mixed dimensionality".into()));
            }
            if points.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument("non-finite landmark coordinate".into()));
            }
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Dimensionality, or `None` for an empty set.
    pub fn ndim(&self) -> Option<usize> {
        self.points.first().map(Vec::len)
    }

    /// `true` when every point lies in the physical extent of `grid`.
    pub fn inside(&self, grid: &GridSpec) -> bool {
        self.points.iter().all(|p| {
            p.len() == grid.ndim()
                && p.iter()
                    .zip(grid.dims().iter().zip(grid.spacing()))
                    .all(|(&x, (&n, &s))| x >= 0.0 && x <= (n - 1) as f64 * s)
        })
    }
}
