//! Sequential description of a U-shaped restoration network and the
//! transformation that turns its second half into hyper blocks.

use std::fmt;

use crate::arch::BlockHyper;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Encoder,
    Bottleneck,
    Decoder,
}

/// Run of transformer blocks sharing one resolution level.
#[derive(Clone, Debug, PartialEq)]
pub struct StageDesc {
    pub role: Role,
    /// 1-based; the bottleneck sits at the deepest level.
    pub level: usize,
    pub channels: usize,
    pub blocks: usize,
    pub heads: usize,
    /// Weight box size when the stage is hyper-parameterised.
    pub box_size: Option<usize>,
}

impl StageDesc {
    pub fn name(&self) -> String {
        match self.role {
            Role::Encoder => format!("enc{}", self.level),
            Role::Bottleneck => "latent".to_string(),
            Role::Decoder => format!("dec{}", self.level),
        }
    }

    pub fn is_hyper(&self) -> bool {
        self.box_size.is_some()
    }
}

/// Stages in execution order: encoders from level 1 down, the bottleneck,
/// then decoders back up to level 1.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchDesc {
    pub base_channels: usize,
    pub ffn_expansion: f64,
    pub stages: Vec<StageDesc>,
    /// Index of the first stage fed by the classifier; the classifier taps the
    /// features entering that stage.
    pub dac_at: Option<usize>,
}

impl ArchDesc {
    pub fn levels(&self) -> usize {
        self.stages.len().div_ceil(2)
    }

    pub fn block_hyper(&self, stage: &StageDesc) -> Result<BlockHyper> {
        BlockHyper::new(stage.channels, stage.heads, self.ffn_expansion)
    }

    /// Width of the features the classifier sees.
    pub fn dac_input_width(&self) -> Option<usize> {
        self.dac_at.map(|i| self.stages[i].channels)
    }

    /// Downsampling factor between the input and the classifier tap.
    pub fn dac_input_stride(&self) -> Option<usize> {
        self.dac_at.map(|i| 1 << (self.stages[i].level - 1))
    }

    pub fn hyper_blocks(&self) -> usize {
        self.stages.iter().filter(|s| s.is_hyper()).map(|s| s.blocks).sum()
    }

    fn validate(&self) -> Result<()> {
        let levels = self.levels();
        if levels < 2 || self.stages.len() != 2 * levels - 1 {
            return Err(Error::invalid(
                "ArchDesc",
                format!("{} stages do not form a U-shape of at least two levels", self.stages.len()),
            ));
        }
        for (i, s) in self.stages.iter().enumerate() {
            let (role, level) = if i + 1 < levels {
                (Role::Encoder, i + 1)
            } else if i + 1 == levels {
                (Role::Bottleneck, levels)
            } else {
                (Role::Decoder, 2 * levels - 1 - i)
            };
            let width = self.base_channels << (level - 1);
            if s.role != role || s.level != level || s.channels != width {
                return Err(Error::invalid(
                    "ArchDesc",
                    format!("stage {i} is {:?} level {} width {}, expected {role:?} level {level} width {width}", s.role, s.level, s.channels),
                ));
            }
            self.block_hyper(s)?;
            if s.box_size == Some(0) {
                return Err(Error::invalid("ArchDesc", format!("stage {} has an empty weight box", s.name())));
            }
        }
        Ok(())
    }
}

impl fmt::Display for ArchDesc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, s) in self.stages.iter().enumerate() {
            if self.dac_at == Some(i) {
                write!(f, "[dac] ")?;
            }
            write!(f, "{}:{}x{}", s.name(), s.blocks, s.channels)?;
            if let Some(n) = s.box_size {
                write!(f, "/N{n}")?;
            }
            if i + 1 < self.stages.len() {
                write!(f, " ")?;
            }
        }
        Ok(())
    }
}

/// Plain Restormer-style U-Net. `blocks` and `heads` are indexed by level
/// (1 to L); decoder stages reuse the block and head counts of their level.
pub fn restormer_desc(base_channels: usize, blocks: &[usize], heads: &[usize], ffn_expansion: f64) -> Result<ArchDesc> {
    let levels = blocks.len();
    if levels < 2 || heads.len() != levels {
        return Err(Error::invalid(
            "restormer_desc",
            format!("{} block counts and {} head counts; need at least two levels of each", levels, heads.len()),
        ));
    }
    if base_channels == 0 || blocks.contains(&0) {
        return Err(Error::invalid("restormer_desc", "widths and block counts must be positive"));
    }
    let stage = |role, level: usize| StageDesc {
        role,
        level,
        channels: base_channels << (level - 1),
        blocks: blocks[level - 1],
        heads: heads[level - 1],
        box_size: None,
    };
    let mut stages: Vec<StageDesc> = (1..levels).map(|l| stage(Role::Encoder, l)).collect();
    stages.push(stage(Role::Bottleneck, levels));
    stages.extend((1..levels).rev().map(|l| stage(Role::Decoder, l)));
    let desc = ArchDesc {
        base_channels,
        ffn_expansion,
        stages,
        dac_at: None,
    };
    desc.validate()?;
    Ok(desc)
}

/// Inserts the classifier before stage `split` and hyper-parameterises that
/// stage and every later one. Stage `s` at level `l` gets a box of
/// `box_sizes[l - 1]` rows. The paper's configuration is a split of 3 on a
/// four-level network ("3+4").
pub fn hyperize(baseline: &ArchDesc, split: usize, box_sizes: &[usize]) -> Result<ArchDesc> {
    baseline.validate()?;
    let n = baseline.stages.len();
    if split == 0 || split >= n {
        return Err(Error::invalid(
            "hyperize",
            format!("split {split} leaves no blocks on one side of {n} stages"),
        ));
    }
    if baseline.dac_at.is_some() || baseline.stages.iter().any(StageDesc::is_hyper) {
        return Err(Error::invalid("hyperize", "baseline is already hyper-parameterised"));
    }
    if box_sizes.len() != baseline.levels() || box_sizes.contains(&0) {
        return Err(Error::invalid(
            "hyperize",
            format!("need {} positive box sizes, got {box_sizes:?}", baseline.levels()),
        ));
    }
    let tap = &baseline.stages[split];
    if tap.channels < baseline.base_channels {
        return Err(Error::invalid(
            "hyperize",
            format!("feature width {} at the split is below the base width", tap.channels),
        ));
    }
    let mut desc = baseline.clone();
    for s in &mut desc.stages[split..] {
        s.box_size = Some(box_sizes[s.level - 1]);
    }
    desc.dac_at = Some(split);
    Ok(desc)
}

/// Parses `"a+b"` (stage counts before and after the split) or a bare index.
pub fn parse_split(text: &str, stages: usize) -> Result<usize> {
    let text = text.trim();
    let split = match text.split_once('+') {
        Some((a, b)) => {
            let a: usize = a.trim().parse().map_err(|_| Error::invalid("split", format!("bad split {text:?}")))?;
            let b: usize = b.trim().parse().map_err(|_| Error::invalid("split", format!("bad split {text:?}")))?;
            if a + b != stages {
                return Err(Error::invalid("split", format!("{text} does not cover {stages} stages")));
            }
            a
        }
        None => text.parse().map_err(|_| Error::invalid("split", format!("bad split {text:?}")))?,
    };
    if split == 0 || split >= stages {
        return Err(Error::invalid("split", format!("{text} leaves an empty half")));
    }
    Ok(split)
}
