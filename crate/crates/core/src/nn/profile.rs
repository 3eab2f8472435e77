use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Maximum channel width of any block.
pub const MAX_CHANNELS: usize = 512;

/// Size knobs shared by all five networks. The full-size and desk-size
/// architectures differ only in these numbers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleProfile {
    pub image_size: usize,
    pub enc_dim: usize,
    pub repr_blocks: usize,
    pub gen_blocks: usize,
    pub dface_blocks: usize,
    pub base_channels: usize,
}

impl ScaleProfile {
    /// 128×128 inputs, five encoder blocks, six generator and discriminator blocks.
    pub fn paper() -> Self {
        ScaleProfile {
            image_size: 128,
            enc_dim: 50,
            repr_blocks: 5,
            gen_blocks: 6,
            dface_blocks: 6,
            base_channels: 64,
        }
    }

    /// 32×32 inputs for single-CPU training.
    pub fn desk() -> Self {
        ScaleProfile {
            image_size: 32,
            enc_dim: 32,
            repr_blocks: 3,
            gen_blocks: 4,
            dface_blocks: 4,
            base_channels: 16,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "desk" => Ok(Self::desk()),
            other => Err(Error::arg(format!("unknown profile `{other}` (expected paper|desk)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.image_size;
        if s < 16 || !s.is_power_of_two() {
            return Err(Error::arg(format!("image_size {s} must be a power of two >= 16")));
        }
        if self.enc_dim == 0 || self.base_channels == 0 {
            return Err(Error::arg("enc_dim and base_channels must be positive"));
        }
        if self.repr_blocks == 0 || s >> self.repr_blocks < 2 {
            return Err(Error::arg(format!(
                "repr_blocks {} leaves less than 2x2 of a {s}px image",
                self.repr_blocks
            )));
        }
        if self.gen_blocks == 0 || s >> self.gen_blocks < 2 {
            return Err(Error::arg(format!(
                "gen_blocks {} needs a seed of at least 2px for a {s}px image",
                self.gen_blocks
            )));
        }
        if self.dface_blocks == 0 || s >> self.dface_blocks < 1 {
            return Err(Error::arg(format!("dface_blocks {} too deep for {s}px", self.dface_blocks)));
        }
        Ok(())
    }

    /// Channel width of the `i`-th downsampling block.
    pub fn channels(&self, block: usize) -> usize {
        (self.base_channels << block).min(MAX_CHANNELS)
    }

    /// Spatial size of the representor's last feature map.
    pub fn repr_spatial(&self) -> usize {
        self.image_size >> self.repr_blocks
    }

    /// Spatial size the generator starts upsampling from.
    pub fn seed_spatial(&self) -> usize {
        self.image_size >> self.gen_blocks
    }

    pub fn dface_spatial(&self) -> usize {
        self.image_size >> self.dface_blocks
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_profiles_are_valid() {
        for p in [ScaleProfile::paper(), ScaleProfile::desk()] {
            p.validate().unwrap();
            assert_eq!(p.seed_spatial() << p.gen_blocks, p.image_size);
        }
        assert_eq!(ScaleProfile::paper().repr_spatial(), 4);
        assert_eq!(ScaleProfile::desk().repr_spatial(), 4);
        assert_eq!(ScaleProfile::paper().seed_spatial(), 2);
    }

    #[test]
    fn rejects_bad_geometry() {
        let mut p = ScaleProfile::desk();
        p.image_size = 48;
        assert!(p.validate().is_err());
        let mut p = ScaleProfile::desk();
        p.repr_blocks = 5;
        assert!(p.validate().is_err());
        let mut p = ScaleProfile::desk();
        p.gen_blocks = 5;
        assert!(p.validate().is_err());
        assert!(ScaleProfile::by_name("huge").is_err());
    }

    #[test]
    fn channels_cap() {
        let p = ScaleProfile::paper();
        assert_eq!(p.channels(0), 64);
        assert_eq!(p.channels(3), 512);
        assert_eq!(p.channels(5), 512);
    }
}
