//! Multi-block token masks for masked image modeling.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

const MAX_ATTEMPTS: usize = 100;

/// Block-sampling parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskParams {
    pub n_blocks: usize,
    /// Area of each block as a fraction of the grid.
    pub scale: (f64, f64),
    /// Height over width of each block.
    pub aspect: (f64, f64),
    /// Accepted range of the masked fraction.
    pub r_min: f64,
    pub r_max: f64,
}

impl Default for MaskParams {
    fn default() -> Self {
        MaskParams {
            n_blocks: 4,
            scale: (0.15, 0.2),
            aspect: (0.75, 1.5),
            r_min: 0.3,
            r_max: 0.8,
        }
    }
}

/// A split of a token grid into masked and visible cells. Both index lists
/// are sorted and index cells in row-major order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSpec {
    pub height: usize,
    pub width: usize,
    pub masked: Vec<usize>,
    pub visible: Vec<usize>,
}

impl MaskSpec {
    pub fn from_masked(height: usize, width: usize, flags: &[bool]) -> Self {
        let masked = (0..flags.len()).filter(|&i| flags[i]).collect();
        let visible = (0..flags.len()).filter(|&i| !flags[i]).collect();
        MaskSpec {
            height,
            width,
            masked,
            visible,
        }
    }

    pub fn num_tokens(&self) -> usize {
        self.height * self.width
    }

    pub fn masked_fraction(&self) -> f64 {
        self.masked.len() as f64 / self.num_tokens() as f64
    }
}

fn check(height: usize, width: usize, p: &MaskParams) -> Result<(usize, usize)> {
    let bad = |m: String| Err(Error::InvalidMask(m));
    if p.n_blocks == 0 {
        return bad("n_blocks must be at least 1".into());
    }
    let (s0, s1) = p.scale;
    if !(s0 > 0.0 && s0 <= s1 && s1 <= 1.0) {
        return bad(format!("scale range {:?} must lie in (0, 1]", p.scale));
    }
    let (a0, a1) = p.aspect;
    if !(a0 > 0.0 && a0 <= a1) {
        return bad(format!("aspect range {:?} must be positive", p.aspect));
    }
    if !(0.0 <= p.r_min && p.r_min <= p.r_max && p.r_max <= 1.0) {
        return bad(format!("masked-fraction bounds [{}, {}] invalid", p.r_min, p.r_max));
    }
    let n = height * width;
    if n == 0 || (s0 * n as f64).round() < 1.0 {
        return bad(format!(
            "{height}×{width} grid cannot hold a block of scale {s0}"
        ));
    }
    let lo = (p.r_min * n as f64 - 1e-9).ceil() as usize;
    let hi = (p.r_max * n as f64 + 1e-9).floor() as usize;
    if lo > hi {
        return bad(format!(
            "no masked count on a {n}-token grid lies in [{}, {}]",
            p.r_min, p.r_max
        ));
    }
    Ok((lo, hi))
}

fn sample_union(rng: &mut ChaCha8Rng, height: usize, width: usize, p: &MaskParams) -> Vec<bool> {
    let n = (height * width) as f64;
    let mut flags = vec![false; height * width];
    for _ in 0..p.n_blocks {
        let s = rng.random_range(p.scale.0..=p.scale.1);
        let ar = rng.random_range(p.aspect.0..=p.aspect.1);
        let area = s * n;
        let h = ((area * ar).sqrt().round() as usize).clamp(1, height);
        let w = ((area / ar).sqrt().round() as usize).clamp(1, width);
        let top = rng.random_range(0..=height - h);
        let left = rng.random_range(0..=width - w);
        for y in top..top + h {
            for x in left..left + w {
                flags[y * width + x] = true;
            }
        }
    }
    flags
}

/// Union of `n_blocks` random rectangles. Draws whose masked fraction falls
/// outside `[r_min, r_max]` are redrawn; after 100 failed draws the last one
/// is trimmed or padded with random cells to the nearest admissible count.
pub fn sample_multiblock(height: usize, width: usize, p: &MaskParams, seed: u64) -> Result<MaskSpec> {
    let (lo, hi) = check(height, width, p)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut flags = Vec::new();
    for _ in 0..MAX_ATTEMPTS {
        flags = sample_union(&mut rng, height, width, p);
        let count = flags.iter().filter(|&&f| f).count();
        if (lo..=hi).contains(&count) {
            return Ok(MaskSpec::from_masked(height, width, &flags));
        }
    }
    let count = flags.iter().filter(|&&f| f).count();
    if count > hi {
        let mut on: Vec<usize> = (0..flags.len()).filter(|&i| flags[i]).collect();
        on.shuffle(&mut rng);
        for &i in &on[..count - hi] {
            flags[i] = false;
        }
    } else if count < lo {
        let mut off: Vec<usize> = (0..flags.len()).filter(|&i| !flags[i]).collect();
        off.shuffle(&mut rng);
        for &i in &off[..lo - count] {
            flags[i] = true;
        }
    }
    Ok(MaskSpec::from_masked(height, width, &flags))
}
