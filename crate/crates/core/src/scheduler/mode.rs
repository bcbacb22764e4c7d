//! Run modes and the phase plans they expand to.

use std::fmt;
use std::str::FromStr;

/// Which parameter blocks a phase updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Toggles {
    pub theta: bool,
    /// Gradient updates of the augmentation logits.
    pub tau: bool,
    /// Whether training batches are augmented at all.
    pub apply_da: bool,
    /// Learning rate and weight decay.
    pub eta: bool,
    /// Architecture codes.
    pub arch: bool,
}

impl Toggles {
    pub const NONE: Toggles = Toggles {
        theta: false,
        tau: false,
        apply_da: false,
        eta: false,
        arch: false,
    };

    pub const ALL: Toggles = Toggles {
        theta: true,
        tau: true,
        apply_da: true,
        eta: true,
        arch: true,
    };

    const fn with(theta: bool, da: bool, eta: bool, arch: bool) -> Toggles {
        Toggles {
            theta,
            tau: da,
            apply_da: da,
            eta,
            arch,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PhaseSpec {
    pub toggles: Toggles,
    pub iterations: u64,
    /// Re-draw θ from the init stream when the phase begins.
    pub reinit_theta: bool,
    /// Freeze the genotype extracted at the start of the phase.
    pub fix_genotype: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RunMode {
    Dha,
    SequentialDha,
    NasOnly,
    NasPlusDaJoint,
    NasPlusHpoJoint,
    NasPlusDaSeq,
    NasPlusHpoSeq,
    DaPlusHpoJoint,
    DaPlusHpoSeq,
}

impl RunMode {
    pub const ALL: [RunMode; 9] = [
        RunMode::Dha,
        RunMode::SequentialDha,
        RunMode::NasOnly,
        RunMode::NasPlusDaJoint,
        RunMode::NasPlusHpoJoint,
        RunMode::NasPlusDaSeq,
        RunMode::NasPlusHpoSeq,
        RunMode::DaPlusHpoJoint,
        RunMode::DaPlusHpoSeq,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RunMode::Dha => "DHA",
            RunMode::SequentialDha => "SequentialDHA",
            RunMode::NasOnly => "NasOnly",
            RunMode::NasPlusDaJoint => "NasPlusDA_joint",
            RunMode::NasPlusHpoJoint => "NasPlusHPO_joint",
            RunMode::NasPlusDaSeq => "NasPlusDA_seq",
            RunMode::NasPlusHpoSeq => "NasPlusHPO_seq",
            RunMode::DaPlusHpoJoint => "DAplusHPO_joint",
            RunMode::DaPlusHpoSeq => "DAplusHPO_seq",
        }
    }

    pub fn is_sequential(self) -> bool {
        self.phases(2, 1).len() == 2
    }

    /// Expands the mode into phases for a run of `total` iterations whose
    /// first phase (if any) lasts `phase1` of them.
    pub fn phases(self, total: u64, phase1: u64) -> Vec<PhaseSpec> {
        let single = |toggles| {
            vec![PhaseSpec {
                toggles,
                iterations: total,
                reinit_theta: false,
                fix_genotype: false,
            }]
        };
        let two = |first: Toggles, second: Toggles| {
            let p1 = phase1.min(total);
            vec![
                PhaseSpec {
                    toggles: first,
                    iterations: p1,
                    reinit_theta: false,
                    fix_genotype: false,
                },
                PhaseSpec {
                    toggles: second,
                    iterations: total - p1,
                    reinit_theta: true,
                    fix_genotype: true,
                },
            ]
        };
        let nas = Toggles::with(true, false, false, true);
        match self {
            RunMode::Dha => single(Toggles::ALL),
            RunMode::NasOnly => single(nas),
            RunMode::NasPlusDaJoint => single(Toggles::with(true, true, false, true)),
            RunMode::NasPlusHpoJoint => single(Toggles::with(true, false, true, true)),
            RunMode::DaPlusHpoJoint => single(Toggles::with(true, true, true, false)),
            RunMode::SequentialDha => two(nas, Toggles::with(true, true, true, false)),
            RunMode::NasPlusDaSeq => two(nas, Toggles::with(true, true, false, false)),
            RunMode::NasPlusHpoSeq => two(nas, Toggles::with(true, false, true, false)),
            RunMode::DaPlusHpoSeq => two(
                Toggles::with(true, true, false, false),
                Toggles {
                    tau: false,
                    ..Toggles::with(true, true, true, false)
                },
            ),
        }
    }
}

impl fmt::Display for RunMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown run mode {0:?}")]
pub struct UnknownMode(pub String);

impl FromStr for RunMode {
    type Err = UnknownMode;

    fn from_str(s: &str) -> Result<Self, UnknownMode> {
        let key = s.trim().to_ascii_lowercase().replace('+', "plus").replace(['_', '-'], "");
        RunMode::ALL
            .into_iter()
            .find(|m| m.name().to_ascii_lowercase().replace('_', "") == key)
            .ok_or_else(|| UnknownMode(s.to_string()))
    }
}
