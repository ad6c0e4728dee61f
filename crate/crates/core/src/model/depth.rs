use crate::error::{Error, Result};

/// Mapping between readout potentials and metric depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DepthCode {
    /// `depth = d_max · exp(potential − 1)`.
    Log,
    /// `depth = d_max · potential`.
    Linear,
}

impl DepthCode {
    pub fn name(self) -> &'static str {
        match self {
            DepthCode::Log => "log",
            DepthCode::Linear => "linear",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "log" => Ok(DepthCode::Log),
            "linear" => Ok(DepthCode::Linear),
            other => Err(Error::config("depth_code", format!("expected log|linear, got `{other}`"))),
        }
    }
}

/// Readout code plus the clamping range of the decoded depth, in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthCoding {
    pub code: DepthCode,
    pub d_min: f64,
    pub d_max: f64,
}

impl Default for DepthCoding {
    fn default() -> Self {
        Self { code: DepthCode::Log, d_min: 0.5, d_max: 10.0 }
    }
}

impl DepthCoding {
    pub fn validate(&self) -> Result<()> {
        if !(self.d_min > 0.0 && self.d_max > self.d_min && self.d_max.is_finite()) {
            return Err(Error::config("d_min", format!("need 0 < d_min < d_max, got {} / {}", self.d_min, self.d_max)));
        }
        Ok(())
    }

    pub fn decode(&self, potential: f64) -> f64 {
        let d = match self.code {
            DepthCode::Log => self.d_max * (potential - 1.0).exp(),
            DepthCode::Linear => self.d_max * potential,
        };
        if d.is_nan() {
            return self.d_min;
        }
        d.clamp(self.d_min, self.d_max)
    }

    /// Inverse of [`decode`](Self::decode) on `[d_min, d_max]`.
    pub fn encode(&self, depth: f64) -> f64 {
        let d = depth.clamp(self.d_min, self.d_max);
        match self.code {
            DepthCode::Log => 1.0 + (d / self.d_max).ln(),
            DepthCode::Linear => d / self.d_max,
        }
    }

    /// Decodes a potential raster into a fully valid depth map.
    pub fn decode_depth(&self, height: usize, width: usize, potential: &[f64]) -> DepthMap {
        DepthMap {
            height,
            width,
            depth: potential.iter().map(|&p| self.decode(p) as f32).collect(),
            valid: vec![true; height * width],
        }
    }
}

/// Per-pixel metric depth (meters) with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub height: usize,
    pub width: usize,
    pub depth: Vec<f32>,
    pub valid: Vec<bool>,
}

impl DepthMap {
    pub fn new(height: usize, width: usize, depth: Vec<f32>, valid: Vec<bool>) -> Result<Self> {
        if depth.len() != height * width || valid.len() != height * width {
            return Err(Error::shape("depth_map", format!("{height}x{width} raster with {} values", depth.len())));
        }
        if let Some(i) = (0..depth.len()).find(|&i| valid[i] && !depth[i].is_finite()) {
            return Err(Error::Invalid(format!("non-finite depth at valid pixel {i}")));
        }
        Ok(Self { height, width, depth, valid })
    }

    pub fn constant(height: usize, width: usize, value: f32) -> Self {
        Self { height, width, depth: vec![value; height * width], valid: vec![true; height * width] }
    }

    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.depth[y * self.width + x]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_potential_decodes_to_max_depth() {
        let c = DepthCoding::default();
        assert_eq!(c.decode(1.0), 10.0);
        assert!((c.decode(1.0 + 0.5f64.ln()) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn decode_is_monotone_and_clamped() {
        let c = DepthCoding::default();
        let mut prev = 0.0;
        for i in 0..100 {
            let d = c.decode(-2.0 + i as f64 * 0.03);
            assert!(d >= prev);
            prev = d;
        }
        assert_eq!(c.decode(-50.0), 0.5);
        assert_eq!(c.decode(5.0), 10.0);
    }

    #[test]
    fn encode_inverts_decode() {
        for code in [DepthCode::Log, DepthCode::Linear] {
            let c = DepthCoding { code, ..Default::default() };
            for d in [0.5, 1.0, 3.3, 9.99, 10.0] {
                assert!((c.decode(c.encode(d)) - d).abs() < 1e-12);
            }
        }
    }
}
