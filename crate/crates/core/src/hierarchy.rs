//! Label hierarchy across the three cascade stages and subgroup routing.
//!
//! Codes are fixed across the crate: BG=0, LV=1, MYO=2, MIT=3, MVO=4. In the
//! stage-1 schema code 2 means f-MYO (MYO ∪ MIT ∪ MVO); in the stage-2 schema
//! code 3 means f-MIT (MIT ∪ MVO).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{LabelVolume, ProbVolume, ProbKind};

pub const BG: u8 = 0;
pub const LV: u8 = 1;
pub const MYO: u8 = 2;
pub const MIT: u8 = 3;
pub const MVO: u8 = 4;
pub const F_MYO: u8 = 2;
pub const F_MIT: u8 = 3;

/// Foreground labels reported by the evaluation, in report order.
pub const EVAL_LABELS: [u8; 4] = [LV, MYO, MIT, MVO];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LabelSchema {
    /// BG, LV, f-MYO
    Stage1,
    /// BG, LV, MYO, f-MIT
    Stage2,
    /// BG, LV, MYO, MIT, MVO
    Stage3,
}

impl LabelSchema {
    pub const ALL: [LabelSchema; 3] = [LabelSchema::Stage1, LabelSchema::Stage2, LabelSchema::Stage3];

    pub fn for_stage(stage: usize) -> Option<Self> {
        match stage {
            1 => Some(LabelSchema::Stage1),
            2 => Some(LabelSchema::Stage2),
            3 => Some(LabelSchema::Stage3),
            _ => None,
        }
    }

    pub fn stage(self) -> usize {
        match self {
            LabelSchema::Stage1 => 1,
            LabelSchema::Stage2 => 2,
            LabelSchema::Stage3 => 3,
        }
    }

    /// Number of labels K, background included.
    pub fn num_labels(self) -> usize {
        self.stage() + 2
    }

    pub fn from_channels(k: usize) -> Option<Self> {
        match k {
            3 => Some(LabelSchema::Stage1),
            4 => Some(LabelSchema::Stage2),
            5 => Some(LabelSchema::Stage3),
            _ => None,
        }
    }

    pub fn contains(self, code: u8) -> bool {
        (code as usize) < self.num_labels()
    }

    pub fn names(self) -> &'static [&'static str] {
        match self {
            LabelSchema::Stage1 => &["BG", "LV", "f-MYO"],
            LabelSchema::Stage2 => &["BG", "LV", "MYO", "f-MIT"],
            LabelSchema::Stage3 => &["BG", "LV", "MYO", "MIT", "MVO"],
        }
    }
}

pub fn label_name(code: u8) -> &'static str {
    LabelSchema::Stage3.names().get(code as usize).copied().unwrap_or("?")
}

/// Acquisition subgroup: days, one month or twelve months after infarction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Subgroup {
    D8,
    M1,
    M12,
}

impl Subgroup {
    pub const ALL: [Subgroup; 3] = [Subgroup::D8, Subgroup::M1, Subgroup::M12];

    /// Only acute cases can carry MVO.
    pub fn allows_mvo(self) -> bool {
        self == Subgroup::D8
    }
}

impl fmt::Display for Subgroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Subgroup::D8 => "D8",
            Subgroup::M1 => "M1",
            Subgroup::M12 => "M12",
        })
    }
}

impl FromStr for Subgroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "D8" => Ok(Subgroup::D8),
            "M1" => Ok(Subgroup::M1),
            "M12" => Ok(Subgroup::M12),
            other => Err(Error::Config(format!("unknown subgroup {other:?}"))),
        }
    }
}

/// Maps a stage-3 code to its parent at `stage`.
pub fn collapse_code(code: u8, stage: usize) -> Result<u8> {
    if !LabelSchema::Stage3.contains(code) {
        return Err(Error::UnknownCode(code));
    }
    Ok(match (stage, code) {
        (3, c) => c,
        (2, MIT | MVO) => F_MIT,
        (2, c) => c,
        (1, MYO | MIT | MVO) => F_MYO,
        (1, c) => c,
        _ => return Err(Error::SchemaMismatch(format!("no stage {stage}"))),
    })
}

/// Rewrites full stage-3 ground truth into the label definition of `stage`.
pub fn collapse_to_stage(y: &LabelVolume, stage: usize) -> Result<LabelVolume> {
    if y.schema() != LabelSchema::Stage3 {
        return Err(Error::SchemaMismatch(format!(
            "collapse expects stage-3 labels, got {:?}",
            y.schema()
        )));
    }
    let schema = LabelSchema::for_stage(stage)
        .ok_or_else(|| Error::SchemaMismatch(format!("no stage {stage}")))?;
    let mut table = [0u8; 5];
    for (c, slot) in table.iter_mut().enumerate() {
        *slot = collapse_code(c as u8, stage)?;
    }
    let data = y.data().iter().map(|&c| table[c as usize]).collect();
    LabelVolume::new(*y.geometry(), schema, data)
}

pub fn contains_mvo(y: &LabelVolume) -> bool {
    y.schema() == LabelSchema::Stage3 && y.data().contains(&MVO)
}

/// Picks the final prediction for a subgroup: stage 3 for D8, stage 2 otherwise.
pub fn select_final(y2: &ProbVolume, y3: &ProbVolume, sg: Subgroup) -> Result<ProbVolume> {
    y2.geometry().ensure_same(y3.geometry())?;
    if y2.kind() != ProbKind::Probs || y3.kind() != ProbKind::Probs {
        return Err(Error::NotProbabilities);
    }
    if y2.channels() != 4 || y3.channels() != 5 {
        return Err(Error::SchemaMismatch(format!(
            "expected 4 and 5 channels, got {} and {}",
            y2.channels(),
            y3.channels()
        )));
    }
    Ok(match sg {
        Subgroup::D8 => y3.clone().with_schema(LabelSchema::Stage3),
        Subgroup::M1 | Subgroup::M12 => y2.clone().with_schema(LabelSchema::Stage2),
    })
}

/// Expresses a hard prediction in stage-3 codes for evaluation.
///
/// Stage-2 predictions report f-MIT as MIT and never contain MVO; the codes
/// coincide, so only the schema tag changes.
pub fn to_eval_labels(pred: LabelVolume) -> Result<LabelVolume> {
    match pred.schema() {
        LabelSchema::Stage3 => Ok(pred),
        LabelSchema::Stage2 => pred.with_schema(LabelSchema::Stage3),
        LabelSchema::Stage1 => Err(Error::SchemaMismatch(
            "stage-1 predictions cannot be scored at stage-3 granularity".into(),
        )),
    }
}
