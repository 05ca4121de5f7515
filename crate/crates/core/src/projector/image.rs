use super::ConeBeamGeometry;

/// A detector image of line integrals, u-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionImage {
    pub nu: usize,
    pub nv: usize,
    pub pitch: f64,
    pub data: Vec<f32>,
    pub geometry: Option<ConeBeamGeometry>,
}

impl ProjectionImage {
    pub fn zeros(nu: usize, nv: usize, pitch: f64) -> Self {
        ProjectionImage {
            nu,
            nv,
            pitch,
            data: vec![0.0; nu * nv],
            geometry: None,
        }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i + self.nu * j]
    }

    pub fn max(&self) -> f32 {
        self.data.iter().cloned().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Flip along u.
    pub fn mirrored_u(&self) -> Self {
        let mut out = self.clone();
        for j in 0..self.nv {
            for i in 0..self.nu {
                out.data[i + self.nu * j] = self.data[(self.nu - 1 - i) + self.nu * j];
            }
        }
        out
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }
}

/// Beer-Lambert display transform: `exp(-p)`, then min-max normalized to
/// [0, 1]. A constant image maps to all zeros.
pub fn to_display(img: &ProjectionImage) -> ProjectionImage {
    let raw: Vec<f64> = img.data.iter().map(|&p| (-(p as f64)).exp()).collect();
    let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let data = raw
        .iter()
        .map(|&v| if range > 0.0 { ((v - lo) / range) as f32 } else { 0.0 })
        .collect();
    ProjectionImage {
        data,
        ..img.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_maps_to_zero() {
        let img = ProjectionImage::zeros(8, 8, 1.0);
        assert!(to_display(&img).data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn beer_lambert_and_monotone() {
        assert!(((-(2f64.ln())).exp() - 0.5).abs() < 1e-15);
        let mut img = ProjectionImage::zeros(8, 8, 1.0);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = i as f32 * 0.05;
        }
        let d = to_display(&img);
        assert_eq!(d.data[0], 1.0);
        assert_eq!(*d.data.last().unwrap(), 0.0);
        assert!(d.data.windows(2).all(|w| w[1] < w[0]));
    }
}
