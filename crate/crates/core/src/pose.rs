//! Keypoint annotations and joint schemas.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    /// False when the joint is occluded in the image.
    pub visible: bool,
    /// False when the joint carries no annotation at all.
    pub annotated: bool,
}

impl Keypoint {
    pub fn new(x: f64, y: f64) -> Self {
        Keypoint {
            x,
            y,
            visible: true,
            annotated: true,
        }
    }

    pub fn missing() -> Self {
        Keypoint {
            x: 0.0,
            y: 0.0,
            visible: false,
            annotated: false,
        }
    }
}

/// Report columns in the conventional order.
pub const REPORT_COLUMNS: [&str; 7] = ["Hea", "Sho", "Elb", "Wri", "Hip", "Kne", "Ank"];

/// Joint names and the report column each joint is pooled into.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JointSchema {
    pub names: Vec<String>,
    /// Index into [`REPORT_COLUMNS`] per joint; `None` leaves the joint out of
    /// every column (it still counts towards the total).
    pub columns: Vec<Option<usize>>,
}

impl JointSchema {
    /// Eight joints for the synthetic stick figures: head, neck, shoulders,
    /// arm tips and leg tips.
    pub fn toy() -> Self {
        let spec: [(&str, Option<usize>); 8] = [
            ("head", Some(0)),
            ("neck", Some(0)),
            ("l_shoulder", Some(1)),
            ("r_shoulder", Some(1)),
            ("l_hand", Some(3)),
            ("r_hand", Some(3)),
            ("l_foot", Some(6)),
            ("r_foot", Some(6)),
        ];
        JointSchema {
            names: spec.iter().map(|s| s.0.to_string()).collect(),
            columns: spec.iter().map(|s| s.1).collect(),
        }
    }

    /// The 16-joint MPII layout.
    pub fn mpii() -> Self {
        let spec: [(&str, Option<usize>); 16] = [
            ("r_ankle", Some(6)),
            ("r_knee", Some(5)),
            ("r_hip", Some(4)),
            ("l_hip", Some(4)),
            ("l_knee", Some(5)),
            ("l_ankle", Some(6)),
            ("pelvis", None),
            ("thorax", None),
            ("upper_neck", Some(0)),
            ("head_top", Some(0)),
            ("r_wrist", Some(3)),
            ("r_elbow", Some(2)),
            ("r_shoulder", Some(1)),
            ("l_shoulder", Some(1)),
            ("l_elbow", Some(2)),
            ("l_wrist", Some(3)),
        ];
        JointSchema {
            names: spec.iter().map(|s| s.0.to_string()).collect(),
            columns: spec.iter().map(|s| s.1).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}
