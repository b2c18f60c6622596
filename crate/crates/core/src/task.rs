//! Structured task specifications and their one-hot encodings.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Action {
    PickUp,
    PushRight,
}

impl Action {
    pub const ALL: [Action; 2] = [Action::PickUp, Action::PushRight];

    pub fn index(self) -> usize {
        match self {
            Action::PickUp => 0,
            Action::PushRight => 1,
        }
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL.get(i).copied().ok_or_else(|| Error::Lookup(format!("action index {i}")))
    }

    /// Wire name used in JSON records and the CLI.
    pub fn name(self) -> &'static str {
        match self {
            Action::PickUp => "pick",
            Action::PushRight => "push",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pick" | "pick_up" | "pick-up" => Ok(Action::PickUp),
            "push" | "push_right" | "push-right" => Ok(Action::PushRight),
            other => Err(Error::Lookup(format!("unknown action {other:?}"))),
        }
    }

    pub fn phrase(self) -> &'static str {
        match self {
            Action::PickUp => "pick up",
            Action::PushRight => "push",
        }
    }
}

/// Action plus the target object's (shape, color) identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TaskSpec {
    pub action: Action,
    pub shape: usize,
    pub color: usize,
    pub n_shapes: usize,
    pub n_colors: usize,
}

impl TaskSpec {
    pub fn new(action: Action, shape: usize, color: usize, n_shapes: usize, n_colors: usize) -> Result<Self> {
        if n_shapes < 2 || n_colors < 2 {
            bail!(Validation, "need at least two shapes and two colors, got {n_shapes}x{n_colors}");
        }
        if shape >= n_shapes {
            bail!(Validation, "shape id {shape} >= {n_shapes}");
        }
        if color >= n_colors {
            bail!(Validation, "color id {color} >= {n_colors}");
        }
        Ok(Self { action, shape, color, n_shapes, n_colors })
    }

    /// Builds a spec from explicit one-hot vectors, rejecting anything that is not exactly one-hot.
    pub fn from_one_hots(action: Action, shape: &[f64], color: &[f64]) -> Result<Self> {
        let s = one_hot_index(shape).ok_or_else(|| Error::Validation(format!("shape vector {shape:?} is not one-hot")))?;
        let c = one_hot_index(color).ok_or_else(|| Error::Validation(format!("color vector {color:?} is not one-hot")))?;
        Self::new(action, s, c, shape.len(), color.len())
    }

    pub fn shape_one_hot(&self) -> Vec<f64> {
        one_hot(self.shape, self.n_shapes)
    }

    pub fn color_one_hot(&self) -> Vec<f64> {
        one_hot(self.color, self.n_colors)
    }

    /// `[shape | color | action]`.
    pub fn encode(&self) -> TaskEncoding {
        let mut v = self.shape_one_hot();
        v.extend(self.color_one_hot());
        v.extend(one_hot(self.action.index(), Action::ALL.len()));
        TaskEncoding { values: v, n_shapes: self.n_shapes, n_colors: self.n_colors }
    }

    /// `[shape | color]`, the part consumed by the vision networks.
    pub fn object_encoding(&self) -> Vec<f64> {
        let mut v = self.shape_one_hot();
        v.extend(self.color_one_hot());
        v
    }

    pub fn same_object(&self, shape: usize, color: usize) -> bool {
        self.shape == shape && self.color == color
    }

    /// Every (action, shape, color) combination in a fixed order.
    pub fn grid(n_shapes: usize, n_colors: usize) -> Vec<TaskSpec> {
        let mut out = Vec::with_capacity(2 * n_shapes * n_colors);
        for action in Action::ALL {
            for shape in 0..n_shapes {
                for color in 0..n_colors {
                    out.push(TaskSpec { action, shape, color, n_shapes, n_colors });
                }
            }
        }
        out
    }

    pub fn render_sentence(&self, vocab: &Vocab) -> Result<String> {
        let color = vocab.colors.get(self.color).ok_or_else(|| Error::Lookup(format!("color id {}", self.color)))?;
        let shape = vocab.shapes.get(self.shape).ok_or_else(|| Error::Lookup(format!("shape id {}", self.shape)))?;
        Ok(format!("{} the {} {}", self.action.phrase(), color, shape))
    }
}

fn one_hot(i: usize, n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    v
}

fn one_hot_index(v: &[f64]) -> Option<usize> {
    let mut hit = None;
    for (i, &x) in v.iter().enumerate() {
        if x == 1.0 {
            if hit.is_some() {
                return None;
            }
            hit = Some(i);
        } else if x != 0.0 {
            return None;
        }
    }
    hit
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskEncoding {
    pub values: Vec<f64>,
    pub n_shapes: usize,
    pub n_colors: usize,
}

impl TaskEncoding {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn decode(&self) -> Result<TaskSpec> {
        let (s, c) = (self.n_shapes, self.n_colors);
        let a = Action::ALL.len();
        if self.values.len() != s + c + a {
            bail!(Dimension, "encoding length {} != {}", self.values.len(), s + c + a);
        }
        let action = one_hot_index(&self.values[s + c..]).ok_or_else(|| Error::Validation("action bits are not one-hot".to_string()))?;
        TaskSpec::from_one_hots(Action::from_index(action)?, &self.values[..s], &self.values[s..s + c])
    }
}

/// Display names for shape and color ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    pub shapes: Vec<String>,
    pub colors: Vec<String>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self { shapes: ["bowl", "towel", "ring", "box"].iter().map(|s| s.to_string()).collect(), colors: ["red", "white", "blue"].iter().map(|s| s.to_string()).collect() }
    }
}

impl Vocab {
    pub fn shape_id(&self, name: &str) -> Result<usize> {
        self.shapes.iter().position(|s| s == name).ok_or_else(|| Error::Lookup(format!("unknown shape {name:?}")))
    }

    pub fn color_id(&self, name: &str) -> Result<usize> {
        self.colors.iter().position(|s| s == name).ok_or_else(|| Error::Lookup(format!("unknown color {name:?}")))
    }

    /// Parses `action:color:shape`, e.g. `pick:red:bowl`.
    pub fn parse_task(&self, s: &str) -> Result<TaskSpec> {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 3 {
            bail!(Lookup, "task {s:?} is not action:color:shape");
        }
        let action = Action::parse(parts[0])?;
        TaskSpec::new(action, self.shape_id(parts[2])?, self.color_id(parts[1])?, self.shapes.len(), self.colors.len())
    }
}
