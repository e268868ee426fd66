use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv;

/// Declarative description of a U-Net.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    /// Channel width per resolution level, finest first.
    pub levels: Vec<usize>,
    /// Reversible blocks per encoder sequence.
    pub encoder_blocks: usize,
    /// Reversible blocks per decoder sequence.
    pub decoder_blocks: usize,
    pub reversible: bool,
    pub in_channels: usize,
    pub out_regions: usize,
    /// Extent of the level convolutions.
    pub kernel_size: usize,
    /// Extent of the stem and head convolutions.
    pub stem_kernel: usize,
    /// Channels per normalization group.
    pub group_size: usize,
}

impl Default for ArchitectureSpec {
    fn default() -> Self {
        Self::reversible(1, 1)
    }
}

impl ArchitectureSpec {
    /// Non-reversible reference network (about 12.4M parameters).
    pub fn baseline() -> Self {
        ArchitectureSpec {
            levels: vec![30, 60, 120, 240, 480],
            encoder_blocks: 0,
            decoder_blocks: 0,
            reversible: false,
            in_channels: 4,
            out_regions: 3,
            kernel_size: 3,
            stem_kernel: 1,
            group_size: 10,
        }
    }

    /// Partially reversible network with a parameter budget close to
    /// [`baseline`](Self::baseline) at one block per sequence.
    pub fn reversible(encoder_blocks: usize, decoder_blocks: usize) -> Self {
        ArchitectureSpec {
            levels: vec![60, 120, 240, 360, 480],
            encoder_blocks,
            decoder_blocks,
            reversible: true,
            ..Self::baseline()
        }
    }

    /// Four-level baseline small enough to train on a CPU.
    pub fn desk_baseline() -> Self {
        ArchitectureSpec {
            levels: vec![8, 16, 32, 64],
            group_size: 4,
            ..Self::baseline()
        }
    }

    /// Reversible counterpart of [`desk_baseline`](Self::desk_baseline):
    /// twice as wide at the top, equal at the bottom, similar parameter count.
    pub fn desk_reversible(encoder_blocks: usize, decoder_blocks: usize) -> Self {
        ArchitectureSpec {
            levels: vec![16, 32, 48, 64],
            encoder_blocks,
            decoder_blocks,
            reversible: true,
            ..Self::desk_baseline()
        }
    }

    /// Two-level reversible network for smoke tests.
    pub fn tiny() -> Self {
        ArchitectureSpec {
            levels: vec![4, 8],
            encoder_blocks: 1,
            decoder_blocks: 1,
            reversible: true,
            group_size: 2,
            ..Self::baseline()
        }
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    /// Every spatial extent fed to the network must be a multiple of this.
    pub fn divisor(&self) -> usize {
        1 << self.levels.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |field, reason: String| Err(Error::Spec { field, reason });
        if self.levels.len() < 2 {
            return err(
                "levels",
                format!("need at least 2 levels, got {}", self.levels.len()),
            );
        }
        if let Some(w) = self.levels.iter().find(|&&w| w == 0) {
            return err("levels", format!("width {w} must be positive"));
        }
        if self.in_channels == 0 {
            return err("in_channels", "must be positive".into());
        }
        if self.out_regions == 0 {
            return err("out_regions", "must be positive".into());
        }
        for (field, k) in [
            ("kernel_size", self.kernel_size),
            ("stem_kernel", self.stem_kernel),
        ] {
            if k % 2 == 0 {
                return err(field, format!("{k} must be odd"));
            }
        }
        if self.group_size == 0 {
            return err("group_size", "must be positive".into());
        }
        for &w in &self.levels {
            let normed = if self.reversible {
                if w % 2 != 0 {
                    return err("levels", format!("reversible width {w} must be even"));
                }
                w / 2
            } else {
                w
            };
            if normed % self.group_size != 0 {
                return err(
                    "levels",
                    format!(
                        "normalized width {normed} (level {w}) not divisible by group_size {}",
                        self.group_size
                    ),
                );
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        std::fs::read_to_string(path)?.parse()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(std::fs::write(path, self.to_string())?)
    }
}

impl fmt::Display for ArchitectureSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "levels = {}", kv::join(&self.levels))?;
        writeln!(f, "encoder_blocks = {}", self.encoder_blocks)?;
        writeln!(f, "decoder_blocks = {}", self.decoder_blocks)?;
        writeln!(f, "reversible = {}", self.reversible)?;
        writeln!(f, "in_channels = {}", self.in_channels)?;
        writeln!(f, "out_regions = {}", self.out_regions)?;
        writeln!(f, "kernel_size = {}", self.kernel_size)?;
        writeln!(f, "stem_kernel = {}", self.stem_kernel)?;
        writeln!(f, "group_size = {}", self.group_size)
    }
}

impl FromStr for ArchitectureSpec {
    type Err = Error;

    /// Parses `key = value` lines over the defaults of
    /// [`ArchitectureSpec::reversible`]`(1, 1)`; `levels` is mandatory.
    fn from_str(text: &str) -> Result<Self> {
        let entries = kv::parse(text).map_err(|reason| Error::Spec {
            field: "file",
            reason,
        })?;
        let mut spec = ArchitectureSpec::default();
        let mut saw_levels = false;
        for e in entries {
            let bad = |field: &'static str| Error::Spec {
                field,
                reason: format!("line {}: cannot parse `{}`", e.line, e.value),
            };
            match e.key {
                "levels" => {
                    spec.levels = kv::list(e.value).ok_or_else(|| bad("levels"))?;
                    saw_levels = true;
                }
                "encoder_blocks" => {
                    spec.encoder_blocks = e.value.parse().map_err(|_| bad("encoder_blocks"))?
                }
                "decoder_blocks" => {
                    spec.decoder_blocks = e.value.parse().map_err(|_| bad("decoder_blocks"))?
                }
                "reversible" => spec.reversible = e.value.parse().map_err(|_| bad("reversible"))?,
                "in_channels" => {
                    spec.in_channels = e.value.parse().map_err(|_| bad("in_channels"))?
                }
                "out_regions" => {
                    spec.out_regions = e.value.parse().map_err(|_| bad("out_regions"))?
                }
                "kernel_size" => {
                    spec.kernel_size = e.value.parse().map_err(|_| bad("kernel_size"))?
                }
                "stem_kernel" => {
                    spec.stem_kernel = e.value.parse().map_err(|_| bad("stem_kernel"))?
                }
                "group_size" => spec.group_size = e.value.parse().map_err(|_| bad("group_size"))?,
                other => {
                    return Err(Error::Spec {
                        field: "file",
                        reason: format!("line {}: unknown key `{other}`", e.line),
                    })
                }
            }
        }
        if !saw_levels {
            return Err(Error::Spec {
                field: "levels",
                reason: "missing".into(),
            });
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        for s in [
            ArchitectureSpec::baseline(),
            ArchitectureSpec::reversible(4, 1),
            ArchitectureSpec::tiny(),
        ] {
            s.validate().unwrap();
        }
    }

    #[test]
    fn text_round_trip() {
        let s = ArchitectureSpec::reversible(3, 1);
        assert_eq!(s.to_string().parse::<ArchitectureSpec>().unwrap(), s);
    }

    #[test]
    fn violations_name_the_field() {
        let field = |text: &str| match text.parse::<ArchitectureSpec>() {
            Err(Error::Spec { field, .. }) => field,
            other => panic!("expected spec error, got {other:?}"),
        };
        assert_eq!(field(""), "levels");
        assert_eq!(field("levels = 8"), "levels");
        assert_eq!(field("levels = 8,10\ngroup_size = 2"), "levels");
        assert_eq!(field("levels = 8,16\nkernel_size = 4"), "kernel_size");
        assert_eq!(field("levels = 8,16\nwidth = 3"), "file");
        assert_eq!(field("levels = 8,x"), "levels");
        assert_eq!(field("levels = 8,16\nreversible = maybe"), "reversible");
    }

    #[test]
    fn odd_widths_allowed_without_reversibility() {
        let s: ArchitectureSpec = "levels = 5,15\nreversible = false\ngroup_size = 5"
            .parse()
            .unwrap();
        assert_eq!(s.divisor(), 2);
    }
}
