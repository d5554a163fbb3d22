use crate::error::{CoreError, Result};
use serde::{Deserialize, Serialize};

pub const NUM_CLASSES: usize = 4;

/// The four annotation classes, in label-vector order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Activity {
    Ventilation = 0,
    Stimulation = 1,
    Suction = 2,
    BabyOnTable = 3,
}

impl Activity {
    pub const ALL: [Activity; NUM_CLASSES] = [
        Activity::Ventilation,
        Activity::Stimulation,
        Activity::Suction,
        Activity::BabyOnTable,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Activity::Ventilation => "ventilation",
            Activity::Stimulation => "stimulation",
            Activity::Suction => "suction",
            Activity::BabyOnTable => "baby_on_table",
        }
    }

    pub fn from_name(name: &str) -> Option<Activity> {
        match name {
            "ventilation" => Some(Activity::Ventilation),
            "stimulation" => Some(Activity::Stimulation),
            "suction" => Some(Activity::Suction),
            "baby_on_table" => Some(Activity::BabyOnTable),
            _ => None,
        }
    }
}

impl std::fmt::Display for Activity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Binary multi-label target `[ventilation, stimulation, suction,
/// baby_on_table]`. Ventilation and suction are mutually exclusive; that is
/// enforced at construction. An active activity without a visible baby is
/// physically impossible but only warned about at ingestion time, so it is
/// queryable rather than rejected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelVector {
    flags: [bool; NUM_CLASSES],
}

impl LabelVector {
    pub fn new(flags: [bool; NUM_CLASSES]) -> Result<Self> {
        if flags[Activity::Ventilation.index()] && flags[Activity::Suction.index()] {
            return Err(CoreError::Validation {
                line: 0,
                message: "ventilation and suction cannot both be active".into(),
            });
        }
        Ok(LabelVector { flags })
    }

    pub fn empty() -> Self {
        LabelVector { flags: [false; NUM_CLASSES] }
    }

    pub fn get(&self, a: Activity) -> bool {
        self.flags[a.index()]
    }

    pub fn flags(&self) -> [bool; NUM_CLASSES] {
        self.flags
    }

    /// Bits in label order, e.g. `[1, 1, 0, 1]`.
    pub fn bits(&self) -> [u8; NUM_CLASSES] {
        self.flags.map(u8::from)
    }

    pub fn from_bits(bits: [u8; NUM_CLASSES]) -> Result<Self> {
        Self::new(bits.map(|b| b != 0))
    }

    /// Targets as 0.0/1.0 for the loss.
    pub fn targets(&self) -> [f64; NUM_CLASSES] {
        self.flags.map(|b| if b { 1.0 } else { 0.0 })
    }

    /// True when an activity flag is set while `baby_on_table` is not.
    pub fn activity_without_baby(&self) -> bool {
        let any_activity = self.flags[0] || self.flags[1] || self.flags[2];
        any_activity && !self.flags[Activity::BabyOnTable.index()]
    }

    pub fn any(&self) -> bool {
        self.flags.iter().any(|&b| b)
    }
}
