//! The 300-task pick-and-place grid, object attributes, instruction
//! templates and train/test splits.
//!
//! Tasks are laid out as a 50 × 6 grid: rows are object identifiers (32
//! names, then 8 colors, then 10 shapes) and columns are container
//! identifiers. `task_id = row + 50 * col`.

use std::collections::BTreeSet;
use std::fmt;
use std::io::Read;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_ROWS: usize = 50;
pub const NUM_COLS: usize = 6;
pub const NUM_TASKS: usize = NUM_ROWS * NUM_COLS;
pub const NUM_OBJECTS: usize = 32;

pub const COLORS: [&str; 8] = [
    "black and white",
    "brown",
    "blue",
    "gray",
    "white",
    "red",
    "orange",
    "yellow",
];

pub const SHAPES: [&str; 10] = [
    "vase",
    "chalice",
    "freeform",
    "bottle",
    "canoe",
    "cup",
    "bowl",
    "trapezoidal prism",
    "cylinder",
    "round hole",
];

const OBJECT_TABLE: &str = include_str!("../data/objects.txt");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub name: String,
    pub color: String,
    pub shape: String,
    pub object_row: usize,
}

impl ObjectSpec {
    pub fn color_index(&self) -> usize {
        COLORS.iter().position(|c| *c == self.color).unwrap_or(0)
    }

    pub fn shape_index(&self) -> usize {
        SHAPES.iter().position(|s| *s == self.shape).unwrap_or(0)
    }

    pub fn satisfies(&self, task: &TaskSpec) -> bool {
        match task.identifier_type {
            IdentifierType::Name => self.name == task.object_identifier,
            IdentifierType::Color => self.color == task.object_identifier,
            IdentifierType::Shape => self.shape == task.object_identifier,
        }
    }
}

/// Parse an attribute table: `name,color,shape` per line, `#` comments.
pub fn parse_attribute_table(reader: impl Read) -> Result<Vec<ObjectSpec>> {
    let mut text = String::new();
    let mut reader = reader;
    reader.read_to_string(&mut text)?;
    let mut out = Vec::new();
    let mut names = BTreeSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::AttributeTable { line: i + 1, msg };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let [name, color, shape] = fields[..] else {
            return Err(err(format!("expected 3 fields, got {}", fields.len())));
        };
        if !COLORS.contains(&color) {
            return Err(err(format!("unknown color {color:?}")));
        }
        if !SHAPES.contains(&shape) {
            return Err(err(format!("unknown shape {shape:?}")));
        }
        if !names.insert(name.to_string()) {
            return Err(err(format!("duplicate name {name:?}")));
        }
        out.push(ObjectSpec {
            name: name.to_string(),
            color: color.to_string(),
            shape: shape.to_string(),
            object_row: out.len(),
        });
    }
    if out.len() != NUM_OBJECTS {
        return Err(Error::AttributeTable {
            line: 0,
            msg: format!("expected {NUM_OBJECTS} objects, got {}", out.len()),
        });
    }
    for c in COLORS {
        if !out.iter().any(|o| o.color == c) {
            return Err(Error::AttributeTable {
                line: 0,
                msg: format!("color {c:?} unused"),
            });
        }
    }
    for s in SHAPES {
        if !out.iter().any(|o| o.shape == s) {
            return Err(Error::AttributeTable {
                line: 0,
                msg: format!("shape {s:?} unused"),
            });
        }
    }
    Ok(out)
}

/// The shipped attribute table, parsed once.
pub fn objects() -> &'static [ObjectSpec] {
    static TABLE: OnceLock<Vec<ObjectSpec>> = OnceLock::new();
    TABLE.get_or_init(|| {
        parse_attribute_table(OBJECT_TABLE.as_bytes()).expect("shipped attribute table is valid")
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IdentifierType {
    Name,
    Color,
    Shape,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContainerId {
    Green,
    Red,
    Front,
    Back,
    Left,
    Right,
}

impl ContainerId {
    pub const ALL: [ContainerId; NUM_COLS] = [
        ContainerId::Green,
        ContainerId::Red,
        ContainerId::Front,
        ContainerId::Back,
        ContainerId::Left,
        ContainerId::Right,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ContainerId::Green => "green",
            ContainerId::Red => "red",
            ContainerId::Front => "front",
            ContainerId::Back => "back",
            ContainerId::Left => "left",
            ContainerId::Right => "right",
        }
    }

    pub fn is_color(self) -> bool {
        matches!(self, ContainerId::Green | ContainerId::Red)
    }
}

impl fmt::Display for ContainerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: usize,
    pub identifier_type: IdentifierType,
    pub object_identifier: String,
    pub container_identifier: ContainerId,
    pub row: usize,
    pub col: usize,
}

impl TaskSpec {
    pub fn is_color_or_shape(&self) -> bool {
        self.identifier_type != IdentifierType::Name
    }
}

fn row_identifier(row: usize) -> (IdentifierType, String) {
    match row {
        0..=31 => (IdentifierType::Name, objects()[row].name.clone()),
        32..=39 => (IdentifierType::Color, COLORS[row - 32].to_string()),
        _ => (IdentifierType::Shape, SHAPES[row - 40].to_string()),
    }
}

pub fn task(task_id: usize) -> Result<TaskSpec> {
    if task_id >= NUM_TASKS {
        return Err(Error::UnknownTask(task_id));
    }
    let row = task_id % NUM_ROWS;
    let col = task_id / NUM_ROWS;
    let (identifier_type, object_identifier) = row_identifier(row);
    Ok(TaskSpec {
        task_id,
        identifier_type,
        object_identifier,
        container_identifier: ContainerId::ALL[col],
        row,
        col,
    })
}

/// All 300 tasks in task-id order.
pub fn build_task_grid() -> Vec<TaskSpec> {
    (0..NUM_TASKS)
        .map(|id| task(id).expect("id in range"))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    pub task_id: usize,
    pub text: String,
}

pub fn instruction_for(task: &TaskSpec, attrs: &[ObjectSpec]) -> Result<Instruction> {
    if task.task_id >= NUM_TASKS {
        return Err(Error::UnknownTask(task.task_id));
    }
    let object = match task.identifier_type {
        IdentifierType::Name => {
            let obj = attrs
                .iter()
                .find(|o| o.name == task.object_identifier)
                .ok_or_else(|| Error::Unsatisfiable(task.object_identifier.clone()))?;
            format!("{} colored, {} shaped {}", obj.color, obj.shape, obj.name)
        }
        IdentifierType::Color => format!("{} colored object", task.object_identifier),
        IdentifierType::Shape => format!("{} shaped object", task.object_identifier),
    };
    Ok(Instruction {
        task_id: task.task_id,
        text: format!("Put {object} in {} bin.", task.container_identifier),
    })
}

/// Instruction for a task id using the shipped attribute table.
pub fn instruction(task_id: usize) -> Result<Instruction> {
    instruction_for(&task(task_id)?, objects())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scenario {
    A,
    B,
    #[serde(rename = "mini")]
    Mini,
}

impl Scenario {
    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::A => "A",
            Scenario::B => "B",
            Scenario::Mini => "mini",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scenario {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(Scenario::A),
            "B" | "b" => Ok(Scenario::B),
            "mini" => Ok(Scenario::Mini),
            other => Err(Error::InvalidArgument(format!(
                "unknown scenario {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitScenario {
    pub scenario: Scenario,
    pub train_ids: BTreeSet<usize>,
    pub test_ids: BTreeSet<usize>,
}

impl SplitScenario {
    pub fn universe(&self) -> BTreeSet<usize> {
        self.train_ids.union(&self.test_ids).copied().collect()
    }
}

// Rows shared by the gray (always-train) cells of scenarios A and B.
const TRAIN_COLOR_ROWS: [usize; 4] = [36, 37, 38, 39];
const TRAIN_SHAPE_ROWS: [usize; 5] = [40, 41, 42, 43, 44];

// Mini grid: 12 names, 4 colors, 4 shapes; 2 of each held out.
const MINI_TRAIN_ROWS: [usize; 14] = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 36, 37, 40, 41];
const MINI_TEST_ROWS: [usize; 6] = [24, 25, 34, 35, 45, 46];

fn expand(rows: impl IntoIterator<Item = usize>) -> BTreeSet<usize> {
    rows.into_iter()
        .flat_map(|r| (0..NUM_COLS).map(move |c| r + NUM_ROWS * c))
        .collect()
}

pub fn split(scenario: Scenario) -> SplitScenario {
    let (train_rows, test_rows): (Vec<usize>, Vec<usize>) = match scenario {
        Scenario::A => (
            (0..24)
                .chain(TRAIN_COLOR_ROWS)
                .chain(TRAIN_SHAPE_ROWS)
                .collect(),
            (24..36).chain(45..50).collect(),
        ),
        Scenario::B => (
            (0..32)
                .chain(TRAIN_COLOR_ROWS)
                .chain(TRAIN_SHAPE_ROWS)
                .collect(),
            (32..36).chain(45..50).collect(),
        ),
        Scenario::Mini => (MINI_TRAIN_ROWS.to_vec(), MINI_TEST_ROWS.to_vec()),
    };
    SplitScenario {
        scenario,
        train_ids: expand(train_rows),
        test_ids: expand(test_rows),
    }
}

/// One row of a paraphrase file: a task index and its five paraphrases.
#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
pub struct Paraphrases {
    pub task_index: usize,
    pub p1: String,
    pub p2: String,
    pub p3: String,
    pub p4: String,
    pub p5: String,
}

impl Paraphrases {
    pub fn texts(&self) -> [&str; 5] {
        [&self.p1, &self.p2, &self.p3, &self.p4, &self.p5]
    }
}

/// Read a paraphrase CSV with header `task_index,p1,p2,p3,p4,p5`.
pub fn read_paraphrases(reader: impl Read) -> Result<Vec<Paraphrases>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    let mut out = Vec::new();
    for rec in rdr.deserialize() {
        let row: Paraphrases = rec?;
        if row.task_index >= NUM_TASKS {
            return Err(Error::UnknownTask(row.task_index));
        }
        out.push(row);
    }
    Ok(out)
}
