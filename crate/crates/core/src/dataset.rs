//! Loading, validation, and normalization of multiple-choice exam items.
//!
//! Input files are delimiter-separated text (comma or tab, auto-detected
//! from the header line) whose columns follow the shared-task schema:
//! `ItemNum`, `ItemText`, `Answer_A` … `Answer_J`, `Answer_Key`,
//! `Answer_Text`, `ItemType`, `EXAM`, `Difficulty`, `Response_Time`.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Option letters an item may use, in order.
pub const OPTION_LETTERS: [char; 10] = ['A', 'B', 'C', 'D', 'E', 'F', 'G', 'H', 'I', 'J'];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("missing required column `{0}`")]
    MissingColumn(String),
    #[error("row {row}: bad value `{value}` in column `{column}`")]
    BadLabel {
        row: usize,
        column: String,
        value: String,
    },
    #[error("duplicate ItemNum {0}")]
    DuplicateItemNum(i64),
    #[error("input file has no data rows")]
    EmptyFile,
    #[error("cannot fit a scaler: fewer than two distinct values")]
    DegenerateRange,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed input: {0}")]
    Csv(#[from] csv::Error),
}

/// Whether an item carries an image alongside its text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ItemType {
    Text,
    Pix,
}

impl ItemType {
    /// The string the input schema uses for this variant.
    pub fn as_str(self) -> &'static str {
        match self {
            ItemType::Text => "Text",
            ItemType::Pix => "PIX",
        }
    }
}

/// Which exam step an item was administered in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ExamStep {
    Step1,
    Step2,
    Step3,
}

impl ExamStep {
    pub fn as_str(self) -> &'static str {
        match self {
            ExamStep::Step1 => "Step_1",
            ExamStep::Step2 => "Step_2",
            ExamStep::Step3 => "Step_3",
        }
    }
}

/// The two regression targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LabelKind {
    Difficulty,
    ResponseTime,
}

impl LabelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LabelKind::Difficulty => "difficulty",
            LabelKind::ResponseTime => "response_time",
        }
    }
}

/// One multiple-choice question with its metadata and optional raw labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub item_num: i64,
    pub item_text: String,
    /// Present options in letter order. Absent columns or blank cells are
    /// not represented here.
    pub answers: BTreeMap<char, String>,
    pub answer_key: char,
    pub answer_text: String,
    pub item_type: ItemType,
    pub exam_step: ExamStep,
    /// Raw difficulty label, when supplied.
    pub difficulty: Option<f64>,
    /// Raw mean response time in seconds, when supplied.
    pub response_time: Option<f64>,
}

impl Item {
    /// Returns the raw value of the given label, when present.
    pub fn label(&self, kind: LabelKind) -> Option<f64> {
        match kind {
            LabelKind::Difficulty => self.difficulty,
            LabelKind::ResponseTime => self.response_time,
        }
    }
}

/// Whether a loaded set is the training or the held-out split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SetRole {
    Train,
    Test,
}

/// An ordered, validated collection of items.
#[derive(Debug, Clone)]
pub struct ItemSet {
    pub items: Vec<Item>,
    pub role: SetRole,
}

impl ItemSet {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Raw values of the given label across all items carrying it.
    pub fn label_values(&self, kind: LabelKind) -> Vec<f64> {
        self.items.iter().filter_map(|it| it.label(kind)).collect()
    }
}

/// Min-max parameters mapping a raw label into [0, 1] and back.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelScaler {
    pub label: LabelKind,
    pub min: f64,
    pub max: f64,
}

impl LabelScaler {
    /// Fits min and max on the given raw values.
    ///
    /// Fails with [`DatasetError::DegenerateRange`] when fewer than two
    /// distinct values are supplied.
    pub fn fit(values: &[f64], label: LabelKind) -> Result<Self, DatasetError> {
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        for &v in values {
            min = min.min(v);
            max = max.max(v);
        }
        if !(max > min) {
            return Err(DatasetError::DegenerateRange);
        }
        Ok(LabelScaler { label, min, max })
    }

    /// Maps a raw value into scaled space. Values outside the fitted range
    /// scale to values outside [0, 1]; no clamping is applied.
    pub fn scale(&self, y: f64) -> f64 {
        (y - self.min) / (self.max - self.min)
    }

    /// Inverse of [`scale`](Self::scale).
    pub fn unscale(&self, s: f64) -> f64 {
        s * (self.max - self.min) + self.min
    }
}

/// Integer encodings of the categorical columns, used for correlation
/// analysis against the raw labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CategoricalCodes {
    /// 1, 2 or 3 for Step_1..Step_3.
    pub exam_code: i32,
    /// Text = 0, PIX = 1.
    pub item_type_code: i32,
    /// A = 0 … J = 9.
    pub answer_key_code: i32,
}

/// Encodes an item's categorical fields as integers.
pub fn encode_categoricals(item: &Item) -> CategoricalCodes {
    CategoricalCodes {
        exam_code: match item.exam_step {
            ExamStep::Step1 => 1,
            ExamStep::Step2 => 2,
            ExamStep::Step3 => 3,
        },
        item_type_code: match item.item_type {
            ItemType::Text => 0,
            ItemType::Pix => 1,
        },
        answer_key_code: item.answer_key as i32 - 'A' as i32,
    }
}

/// Collapses whitespace runs to single spaces and trims the ends.
pub(crate) fn normalize_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn detect_delimiter(raw: &str) -> u8 {
    let header = raw.lines().next().unwrap_or("");
    if header.contains('\t') {
        b'\t'
    } else {
        b','
    }
}

fn header_matches(header: &str, name: &str) -> bool {
    header.trim_start_matches('\u{feff}').trim().eq_ignore_ascii_case(name)
}

/// Loads and validates an item file.
///
/// The header row is matched case-insensitively against the schema names.
/// Row order is preserved. Rows missing either label are rejected for
/// `role = Train` and accepted for `role = Test`.
pub fn load_items(path: &Path, role: SetRole) -> Result<ItemSet, DatasetError> {
    let raw = std::fs::read_to_string(path)?;
    let delimiter = detect_delimiter(&raw);
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .from_reader(raw.as_bytes());
    let headers = reader.headers()?.clone();

    let find = |name: &str| headers.iter().position(|h| header_matches(h, name));
    let require = |name: &str| find(name).ok_or_else(|| DatasetError::MissingColumn(name.to_string()));

    let item_num_col = require("ItemNum")?;
    let item_text_col = require("ItemText")?;
    let answer_key_col = require("Answer_Key")?;
    let answer_text_col = require("Answer_Text")?;
    let item_type_col = require("ItemType")?;
    let exam_col = require("EXAM")?;
    let difficulty_col = match role {
        SetRole::Train => Some(require("Difficulty")?),
        SetRole::Test => find("Difficulty"),
    };
    let response_time_col = match role {
        SetRole::Train => Some(require("Response_Time")?),
        SetRole::Test => find("Response_Time"),
    };
    let option_cols: Vec<(char, Option<usize>)> = OPTION_LETTERS
        .iter()
        .map(|&letter| (letter, find(&format!("Answer_{letter}"))))
        .collect();

    let mut items = Vec::new();
    let mut seen = HashSet::new();
    for (idx, record) in reader.records().enumerate() {
        let record = record?;
        let row = idx + 1;
        let field = |col: usize| record.get(col).unwrap_or("");
        let bad = |column: &str, value: &str| DatasetError::BadLabel {
            row,
            column: column.to_string(),
            value: value.to_string(),
        };

        let item_num: i64 = field(item_num_col)
            .trim()
            .parse()
            .map_err(|_| bad("ItemNum", field(item_num_col)))?;
        if !seen.insert(item_num) {
            return Err(DatasetError::DuplicateItemNum(item_num));
        }

        let mut answers = BTreeMap::new();
        for &(letter, col) in &option_cols {
            if let Some(col) = col {
                let text = field(col);
                if !text.trim().is_empty() {
                    answers.insert(letter, text.to_string());
                }
            }
        }
        if answers.len() < 2 {
            return Err(bad("Answer_[A-J]", "fewer than two options present"));
        }

        let key_raw = field(answer_key_col).trim();
        let answer_key = match key_raw.chars().next().map(|c| c.to_ascii_uppercase()) {
            Some(c) if key_raw.chars().count() == 1 && OPTION_LETTERS.contains(&c) => c,
            _ => return Err(bad("Answer_Key", key_raw)),
        };
        if !answers.contains_key(&answer_key) {
            return Err(bad("Answer_Key", key_raw));
        }

        let answer_text = field(answer_text_col).to_string();
        if normalize_whitespace(&answer_text) != normalize_whitespace(&answers[&answer_key]) {
            return Err(bad("Answer_Text", &answer_text));
        }

        let type_raw = field(item_type_col).trim();
        let item_type = if type_raw.eq_ignore_ascii_case("text") {
            ItemType::Text
        } else if type_raw.eq_ignore_ascii_case("pix") {
            ItemType::Pix
        } else {
            return Err(bad("ItemType", type_raw));
        };

        let exam_raw = field(exam_col).trim();
        let exam_step = if exam_raw.eq_ignore_ascii_case("step_1") {
            ExamStep::Step1
        } else if exam_raw.eq_ignore_ascii_case("step_2") {
            ExamStep::Step2
        } else if exam_raw.eq_ignore_ascii_case("step_3") {
            ExamStep::Step3
        } else {
            return Err(bad("EXAM", exam_raw));
        };

        let parse_label = |col: Option<usize>, name: &str| -> Result<Option<f64>, DatasetError> {
            let Some(col) = col else { return Ok(None) };
            let cell = field(col).trim();
            if cell.is_empty() {
                return match role {
                    SetRole::Train => Err(bad(name, cell)),
                    SetRole::Test => Ok(None),
                };
            }
            let value: f64 = cell.parse().map_err(|_| bad(name, cell))?;
            if !value.is_finite() {
                return Err(bad(name, cell));
            }
            Ok(Some(value))
        };
        let difficulty = parse_label(difficulty_col, "Difficulty")?;
        let response_time = parse_label(response_time_col, "Response_Time")?;
        if let Some(rt) = response_time {
            if rt <= 0.0 {
                return Err(bad("Response_Time", field(response_time_col.unwrap())));
            }
        }

        items.push(Item {
            item_num,
            item_text: field(item_text_col).to_string(),
            answers,
            answer_key,
            answer_text,
            item_type,
            exam_step,
            difficulty,
            response_time,
        });
    }

    if items.is_empty() {
        return Err(DatasetError::EmptyFile);
    }
    Ok(ItemSet { items, role })
}
