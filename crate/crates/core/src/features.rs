//! Feature assembly and vectorization.
//!
//! Items (optionally augmented with LLM answers) are merged into a single
//! text per item according to a named feature combination, then vectorized
//! with TF-IDF, TF-IDF + PCA, or looked up in a table of precomputed
//! sentence embeddings.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::AugmentedItem;
use crate::dataset::OPTION_LETTERS;

/// Delimiter placed between merged fields.
pub const FIELD_SEPARATOR: &str = " [SEP] ";

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("feature set `{}` requires LLM answers but none are attached", .0.name())]
    MissingLlmAnswers(FeatureSetId),
    #[error("cannot fit TF-IDF on an empty corpus")]
    EmptyCorpus,
    #[error("requested {k} principal components but at most {max} are available")]
    RankTooSmall { k: usize, max: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("duplicate item_num {0}")]
    DuplicateItem(i64),
    #[error("embedding record {line} is missing the `vector` field")]
    MissingVectorField { line: usize },
    #[error("embedding record {line}: {message}")]
    BadEmbeddingRecord { line: usize, message: String },
    #[error("embedding file contains no records")]
    EmptyEmbeddingFile,
    #[error("feature rows have inconsistent widths")]
    RaggedRows,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// The alternative feature combinations used to build model inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSetId {
    All,
    QAnswers,
    Answers,
    #[serde(rename = "q_a")]
    QA,
    LlmsA,
    QLlmsA,
    QLlmsAKey,
}

impl FeatureSetId {
    /// Every feature set, in table order.
    pub const ALL_SETS: [FeatureSetId; 7] = [
        FeatureSetId::All,
        FeatureSetId::QAnswers,
        FeatureSetId::Answers,
        FeatureSetId::QA,
        FeatureSetId::LlmsA,
        FeatureSetId::QLlmsA,
        FeatureSetId::QLlmsAKey,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FeatureSetId::All => "all",
            FeatureSetId::QAnswers => "q_answers",
            FeatureSetId::Answers => "answers",
            FeatureSetId::QA => "q_a",
            FeatureSetId::LlmsA => "llms_a",
            FeatureSetId::QLlmsA => "q_llms_a",
            FeatureSetId::QLlmsAKey => "q_llms_a_key",
        }
    }

    /// Position in the table, used for deterministic tie-breaking.
    pub fn rank(self) -> usize {
        Self::ALL_SETS.iter().position(|&f| f == self).unwrap()
    }

    /// Whether assembling this set needs the attached LLM answers.
    pub fn requires_llm_answers(self) -> bool {
        matches!(
            self,
            FeatureSetId::LlmsA | FeatureSetId::QLlmsA | FeatureSetId::QLlmsAKey
        )
    }
}

impl std::fmt::Display for FeatureSetId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for FeatureSetId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL_SETS
            .iter()
            .copied()
            .find(|f| f.name() == s)
            .ok_or_else(|| format!("unknown feature set `{s}`"))
    }
}

/// Merges the fields named by the feature set into one text, in table
/// order, separated by [`FIELD_SEPARATOR`].
pub fn assemble_text(aug: &AugmentedItem, fs: FeatureSetId) -> Result<String, FeatureError> {
    if fs.requires_llm_answers() && aug.llm_answers.is_empty() {
        return Err(FeatureError::MissingLlmAnswers(fs));
    }
    let item = &aug.item;
    let mut parts: Vec<String> = Vec::new();
    match fs {
        FeatureSetId::All => {
            parts.push(format!("ItemNum={}", item.item_num));
            parts.push(format!("ItemText={}", item.item_text));
            for &letter in &OPTION_LETTERS {
                if let Some(text) = item.answers.get(&letter) {
                    parts.push(format!("Answer_{letter}={text}"));
                }
            }
            parts.push(format!("Answer_Key={}", item.answer_key));
            parts.push(format!("Answer_Text={}", item.answer_text));
            parts.push(format!("ItemType={}", item.item_type.as_str()));
            parts.push(format!("EXAM={}", item.exam_step.as_str()));
        }
        FeatureSetId::QAnswers => {
            parts.push(item.item_text.clone());
            parts.extend(item.answers.values().cloned());
            parts.push(item.answer_text.clone());
        }
        FeatureSetId::Answers => {
            parts.extend(item.answers.values().cloned());
        }
        FeatureSetId::QA => {
            parts.push(item.item_text.clone());
            parts.push(item.answer_text.clone());
        }
        FeatureSetId::LlmsA => {
            parts.extend(aug.llm_answers.iter().map(|(_, a)| a.clone()));
            parts.push(item.answer_text.clone());
        }
        FeatureSetId::QLlmsA => {
            parts.push(item.item_text.clone());
            parts.extend(aug.llm_answers.iter().map(|(_, a)| a.clone()));
            parts.push(item.answer_text.clone());
        }
        FeatureSetId::QLlmsAKey => {
            parts.push(item.item_text.clone());
            parts.extend(aug.llm_answers.iter().map(|(_, a)| a.clone()));
            parts.push(item.answer_text.clone());
            parts.push(item.answer_key.to_string());
        }
    }
    Ok(parts.join(FIELD_SEPARATOR))
}

/// Lowercases and splits into maximal alphanumeric runs.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// A dense row-per-item numeric matrix with an item-id index.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub item_nums: Vec<i64>,
    pub rows: Vec<Vec<f64>>,
    pub width: usize,
}

impl FeatureMatrix {
    pub fn new(item_nums: Vec<i64>, rows: Vec<Vec<f64>>) -> Result<Self, FeatureError> {
        if item_nums.len() != rows.len() {
            return Err(FeatureError::RaggedRows);
        }
        let width = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != width) {
            return Err(FeatureError::RaggedRows);
        }
        let mut seen = HashSet::new();
        for &num in &item_nums {
            if !seen.insert(num) {
                return Err(FeatureError::DuplicateItem(num));
            }
        }
        Ok(FeatureMatrix { item_nums, rows, width })
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    /// Writes the debug dump: header `item_num,c0,...,c{w-1}`, one decimal
    /// row per item.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let mut header = String::from("item_num");
        for j in 0..self.width {
            header.push_str(&format!(",c{j}"));
        }
        writeln!(out, "{header}")?;
        for (num, row) in self.item_nums.iter().zip(&self.rows) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            writeln!(out, "{},{}", num, cells.join(","))?;
        }
        Ok(())
    }
}

/// A fitted TF-IDF vocabulary with per-token document frequencies.
///
/// Column indices are assigned in sorted token order, so fitting the same
/// corpus in any order produces identical vectors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TfidfModel {
    pub vocabulary: BTreeMap<String, usize>,
    pub document_frequency: Vec<u32>,
    pub n_documents: usize,
    pub lowercase: bool,
}

/// Builds the vocabulary and document frequencies over a corpus.
pub fn fit_tfidf(corpus: &[String]) -> Result<TfidfModel, FeatureError> {
    if corpus.is_empty() {
        return Err(FeatureError::EmptyCorpus);
    }
    let mut df: BTreeMap<String, u32> = BTreeMap::new();
    for doc in corpus {
        let unique: HashSet<String> = tokenize(doc).into_iter().collect();
        for token in unique {
            *df.entry(token).or_insert(0) += 1;
        }
    }
    let mut vocabulary = BTreeMap::new();
    let mut document_frequency = Vec::with_capacity(df.len());
    for (idx, (token, count)) in df.into_iter().enumerate() {
        vocabulary.insert(token, idx);
        document_frequency.push(count);
    }
    Ok(TfidfModel {
        vocabulary,
        document_frequency,
        n_documents: corpus.len(),
        lowercase: true,
    })
}

impl TfidfModel {
    pub fn width(&self) -> usize {
        self.vocabulary.len()
    }

    /// Vectorizes one text: raw count times smoothed idf
    /// `ln((1 + n) / (1 + df)) + 1`, then L2-normalized. Out-of-vocabulary
    /// tokens are ignored; an all-zero vector stays zero.
    pub fn transform(&self, text: &str) -> Vec<f64> {
        let mut counts: HashMap<usize, f64> = HashMap::new();
        for token in tokenize(text) {
            if let Some(&idx) = self.vocabulary.get(&token) {
                *counts.entry(idx).or_insert(0.0) += 1.0;
            }
        }
        let n = self.n_documents as f64;
        let mut row = vec![0.0; self.width()];
        for (idx, count) in counts {
            let idf = ((1.0 + n) / (1.0 + self.document_frequency[idx] as f64)).ln() + 1.0;
            row[idx] = count * idf;
        }
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in &mut row {
                *v /= norm;
            }
        }
        row
    }

    /// Vectorizes a batch of texts into a [`FeatureMatrix`].
    pub fn transform_matrix(
        &self,
        item_nums: &[i64],
        texts: &[String],
    ) -> Result<FeatureMatrix, FeatureError> {
        let rows = texts.iter().map(|t| self.transform(t)).collect();
        FeatureMatrix::new(item_nums.to_vec(), rows)
    }
}

/// A fitted principal-component projection.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// k rows of length d, orthonormal.
    pub components: Vec<Vec<f64>>,
    /// Variance captured by each component, nonincreasing.
    pub explained_variance: Vec<f64>,
}

/// Fits the top-k principal directions of the centered matrix.
///
/// Uses the d-by-d scatter eigendecomposition when the feature count is
/// small, otherwise the n-by-n Gram route. Explained variances are the
/// squared singular values divided by n-1.
pub fn fit_pca(x: &FeatureMatrix, k: usize) -> Result<PcaModel, FeatureError> {
    let n = x.n_rows();
    let d = x.width;
    let max_k = d.min(n.saturating_sub(1));
    if n < 2 || k == 0 || k > max_k {
        return Err(FeatureError::RankTooSmall { k, max: max_k });
    }

    let mut mean = vec![0.0; d];
    for row in &x.rows {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let centered = DMatrix::from_fn(n, d, |i, j| x.rows[i][j] - mean[j]);

    let mut components = Vec::with_capacity(k);
    let mut explained_variance = Vec::with_capacity(k);
    if d <= n {
        let scatter = centered.transpose() * &centered;
        let eig = SymmetricEigen::new(scatter);
        let order = sorted_desc(eig.eigenvalues.as_slice());
        for &idx in order.iter().take(k) {
            let lambda = eig.eigenvalues[idx].max(0.0);
            let mut row: Vec<f64> = eig.eigenvectors.column(idx).iter().copied().collect();
            fix_sign(&mut row);
            components.push(row);
            explained_variance.push(lambda / (n as f64 - 1.0));
        }
    } else {
        let gram = &centered * centered.transpose();
        let eig = SymmetricEigen::new(gram);
        let order = sorted_desc(eig.eigenvalues.as_slice());
        let lambda_max = eig.eigenvalues[order[0]].max(0.0);
        for &idx in order.iter().take(k) {
            let lambda = eig.eigenvalues[idx].max(0.0);
            if lambda <= lambda_max * 1e-12 || lambda == 0.0 {
                let rank = order
                    .iter()
                    .filter(|&&i| eig.eigenvalues[i] > lambda_max * 1e-12)
                    .count();
                return Err(FeatureError::RankTooSmall { k, max: rank });
            }
            let u = eig.eigenvectors.column(idx);
            let direction = centered.transpose() * u;
            let norm = direction.norm();
            let mut row: Vec<f64> = direction.iter().map(|v| v / norm).collect();
            fix_sign(&mut row);
            components.push(row);
            explained_variance.push(lambda / (n as f64 - 1.0));
        }
    }

    Ok(PcaModel {
        mean,
        components,
        explained_variance,
    })
}

fn sorted_desc(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap().then(a.cmp(&b)));
    order
}

/// Flips the component so its largest-magnitude entry is positive.
fn fix_sign(row: &mut [f64]) {
    let mut arg = 0;
    for (j, v) in row.iter().enumerate() {
        if v.abs() > row[arg].abs() {
            arg = j;
        }
    }
    if row[arg] < 0.0 {
        for v in row.iter_mut() {
            *v = -*v;
        }
    }
}

impl PcaModel {
    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    /// Projects a vector onto the principal components: `components * (x - mean)`.
    pub fn transform(&self, x: &[f64]) -> Result<Vec<f64>, FeatureError> {
        if x.len() != self.input_dim() {
            return Err(FeatureError::DimensionMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        Ok(self
            .components
            .iter()
            .map(|row| {
                row.iter()
                    .zip(x.iter().zip(&self.mean))
                    .map(|(c, (v, m))| c * (v - m))
                    .sum()
            })
            .collect())
    }

    /// Projects every row of a matrix.
    pub fn transform_matrix(&self, x: &FeatureMatrix) -> Result<FeatureMatrix, FeatureError> {
        let rows = x
            .rows
            .iter()
            .map(|r| self.transform(r))
            .collect::<Result<Vec<_>, _>>()?;
        FeatureMatrix::new(x.item_nums.clone(), rows)
    }
}

/// Precomputed sentence embeddings keyed by item number.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    pub dim: usize,
    vectors: BTreeMap<i64, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn get(&self, item_num: i64) -> Option<&[f64]> {
        self.vectors.get(&item_num).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

/// Loads a JSON-lines embedding file. Every record must carry `item_num`
/// and a numeric `vector` of uniform dimension.
pub fn load_embeddings(
    path: &Path,
    expected_dim: Option<usize>,
) -> Result<EmbeddingTable, FeatureError> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut vectors: BTreeMap<i64, Vec<f64>> = BTreeMap::new();
    let mut dim = expected_dim;
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| FeatureError::BadEmbeddingRecord {
                line: lineno,
                message: e.to_string(),
            })?;
        let item_num = value
            .get("item_num")
            .and_then(serde_json::Value::as_i64)
            .ok_or_else(|| FeatureError::BadEmbeddingRecord {
                line: lineno,
                message: "missing or non-integer `item_num`".to_string(),
            })?;
        let vector = value
            .get("vector")
            .and_then(serde_json::Value::as_array)
            .ok_or(FeatureError::MissingVectorField { line: lineno })?;
        let row: Vec<f64> = vector
            .iter()
            .map(|v| {
                v.as_f64().ok_or_else(|| FeatureError::BadEmbeddingRecord {
                    line: lineno,
                    message: "non-numeric vector entry".to_string(),
                })
            })
            .collect::<Result<_, _>>()?;
        match dim {
            None => dim = Some(row.len()),
            Some(d) if d != row.len() => {
                return Err(FeatureError::DimensionMismatch {
                    expected: d,
                    got: row.len(),
                })
            }
            _ => {}
        }
        if vectors.insert(item_num, row).is_some() {
            return Err(FeatureError::DuplicateItem(item_num));
        }
    }
    let dim = dim.ok_or(FeatureError::EmptyEmbeddingFile)?;
    if vectors.is_empty() {
        return Err(FeatureError::EmptyEmbeddingFile);
    }
    Ok(EmbeddingTable { dim, vectors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{ExamStep, Item, ItemType};
    use rand::{Rng, SeedableRng};
    use std::io::Write;

    fn sample_item() -> Item {
        let mut answers = BTreeMap::new();
        answers.insert('A', "x".to_string());
        answers.insert('B', "y".to_string());
        Item {
            item_num: 42,
            item_text: "Q?".into(),
            answers,
            answer_key: 'A',
            answer_text: "x".into(),
            item_type: ItemType::Text,
            exam_step: ExamStep::Step2,
            difficulty: Some(0.4),
            response_time: Some(60.0),
        }
    }

    fn augmented(item: Item, answers: &[(&str, &str)]) -> AugmentedItem {
        AugmentedItem {
            item,
            llm_answers: answers
                .iter()
                .map(|(n, a)| (n.to_string(), a.to_string()))
                .collect(),
        }
    }

    #[test]
    fn assembles_q_a() {
        let aug = augmented(sample_item(), &[]);
        assert_eq!(assemble_text(&aug, FeatureSetId::QA).unwrap(), "Q? [SEP] x");
    }

    #[test]
    fn q_llms_a_key_appends_key_letter() {
        let aug = augmented(sample_item(), &[("falcon", "ans f"), ("meditron", "ans m")]);
        let text = assemble_text(&aug, FeatureSetId::QLlmsAKey).unwrap();
        assert_eq!(text, "Q? [SEP] ans f [SEP] ans m [SEP] x [SEP] A");
        let without_key = assemble_text(&aug, FeatureSetId::QLlmsA).unwrap();
        assert_eq!(format!("{without_key} [SEP] A"), text);
    }

    #[test]
    fn answers_set_has_one_segment_per_option() {
        let mut item = sample_item();
        for (i, &letter) in OPTION_LETTERS.iter().take(5).enumerate() {
            item.answers.insert(letter, format!("opt{i}"));
        }
        let aug = augmented(item, &[]);
        let text = assemble_text(&aug, FeatureSetId::Answers).unwrap();
        assert_eq!(text.matches(FIELD_SEPARATOR).count(), 4);
    }

    #[test]
    fn llm_sets_require_answers() {
        let aug = augmented(sample_item(), &[]);
        for fs in [FeatureSetId::LlmsA, FeatureSetId::QLlmsA, FeatureSetId::QLlmsAKey] {
            assert!(matches!(
                assemble_text(&aug, fs),
                Err(FeatureError::MissingLlmAnswers(_))
            ));
        }
    }

    #[test]
    fn all_set_keeps_categoricals_as_tokens() {
        let aug = augmented(sample_item(), &[]);
        let text = assemble_text(&aug, FeatureSetId::All).unwrap();
        assert!(text.contains("EXAM=Step_2"));
        assert!(text.contains("ItemType=Text"));
        assert!(text.contains("ItemNum=42"));
        assert!(text.contains("ItemText=Q?"));
    }

    #[test]
    fn question_sets_contain_the_stem() {
        let aug = augmented(sample_item(), &[("falcon", "a")]);
        for fs in [FeatureSetId::All, FeatureSetId::QAnswers, FeatureSetId::QA, FeatureSetId::QLlmsA, FeatureSetId::QLlmsAKey] {
            assert!(assemble_text(&aug, fs).unwrap().contains("Q?"), "{fs} lost the stem");
        }
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(
            tokenize("The correct answer is D."),
            vec!["the", "correct", "answer", "is", "d"]
        );
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("A.x, B.y"), vec!["a", "x", "b", "y"]);
    }

    #[test]
    fn fit_counts_df_per_document() {
        let corpus = vec!["a b".to_string(), "b c".to_string()];
        let model = fit_tfidf(&corpus).unwrap();
        assert_eq!(model.n_documents, 2);
        let df: BTreeMap<&str, u32> = model
            .vocabulary
            .iter()
            .map(|(t, &i)| (t.as_str(), model.document_frequency[i]))
            .collect();
        assert_eq!(df, BTreeMap::from([("a", 1), ("b", 2), ("c", 1)]));

        let repeated = fit_tfidf(&["x x x".to_string()]).unwrap();
        assert_eq!(repeated.document_frequency, vec![1]);
    }

    #[test]
    fn rejects_empty_corpus() {
        assert!(matches!(fit_tfidf(&[]), Err(FeatureError::EmptyCorpus)));
    }

    #[test]
    fn transform_matches_hand_arithmetic() {
        let model = fit_tfidf(&["a b".to_string(), "b c".to_string()]).unwrap();
        let v = model.transform("b");
        let b_idx = model.vocabulary["b"];
        // weight before normalization: 1 * (ln(3/3) + 1) = 1.0
        assert!((v[b_idx] - 1.0).abs() < 1e-12);
        assert!(v.iter().enumerate().all(|(i, &x)| i == b_idx || x == 0.0));
    }

    #[test]
    fn oov_only_text_is_zero_vector() {
        let model = fit_tfidf(&["a b".to_string(), "b c".to_string()]).unwrap();
        assert!(model.transform("z").iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalization_is_scale_invariant() {
        let model = fit_tfidf(&["a b".to_string(), "b c".to_string()]).unwrap();
        let one = model.transform("a");
        let two = model.transform("a a");
        for (x, y) in one.iter().zip(&two) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn transformed_norm_is_one_or_zero() {
        let corpus = vec![
            "alpha beta gamma".to_string(),
            "beta delta".to_string(),
            "gamma gamma epsilon".to_string(),
        ];
        let model = fit_tfidf(&corpus).unwrap();
        for text in corpus.iter().map(String::as_str).chain(["zzz", "alpha zzz"]) {
            let norm: f64 = model.transform(text).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(norm.abs() < 1e-12 || (norm - 1.0).abs() < 1e-12, "norm {norm}");
        }
    }

    #[test]
    fn weights_are_invariant_to_corpus_order() {
        let corpus = vec!["a b".to_string(), "b c".to_string(), "c d a".to_string()];
        let mut reversed = corpus.clone();
        reversed.reverse();
        let m1 = fit_tfidf(&corpus).unwrap();
        let m2 = fit_tfidf(&reversed).unwrap();
        for text in &corpus {
            let v1 = m1.transform(text);
            let v2 = m2.transform(text);
            for (token, &idx1) in &m1.vocabulary {
                let idx2 = m2.vocabulary[token];
                assert_eq!(v1[idx1].to_bits(), v2[idx2].to_bits());
            }
        }
    }

    fn matrix(rows: Vec<Vec<f64>>) -> FeatureMatrix {
        let nums = (0..rows.len() as i64).collect();
        FeatureMatrix::new(nums, rows).unwrap()
    }

    #[test]
    fn pca_two_point_diagonal() {
        let x = matrix(vec![vec![0.0, 0.0], vec![1.0, 1.0]]);
        let model = fit_pca(&x, 1).unwrap();
        assert_eq!(model.mean, vec![0.5, 0.5]);
        let c = &model.components[0];
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((c[0] - s).abs() < 1e-10 && (c[1] - s).abs() < 1e-10);
        let proj = model.transform(&[1.0, 1.0]).unwrap();
        assert!((proj[0] - s).abs() < 1e-10);
        let at_mean = model.transform(&[0.5, 0.5]).unwrap();
        assert!(at_mean[0].abs() < 1e-12);
    }

    #[test]
    fn full_rank_projection_reconstructs() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(5);
        for &(n, d) in &[(6usize, 4usize), (5, 8)] {
            let x = matrix(
                (0..n)
                    .map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect())
                    .collect(),
            );
            let k = d.min(n - 1);
            let model = fit_pca(&x, k).unwrap();
            for row in &x.rows {
                let proj = model.transform(row).unwrap();
                for j in 0..d {
                    let rebuilt: f64 = model.mean[j]
                        + proj
                            .iter()
                            .zip(&model.components)
                            .map(|(p, c)| p * c[j])
                            .sum::<f64>();
                    assert!((rebuilt - row[j]).abs() < 1e-8, "n={n} d={d} j={j}");
                }
            }
        }
    }

    #[test]
    fn components_are_orthonormal_and_variances_match_projection() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(9);
        let n = 20;
        let d = 8;
        let x = matrix(
            (0..n)
                .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect(),
        );
        let model = fit_pca(&x, 3).unwrap();
        for (i, a) in model.components.iter().enumerate() {
            for (j, b) in model.components.iter().enumerate() {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-8);
            }
        }
        // empirical variance of each projected coordinate equals the
        // explained variance
        let projections: Vec<Vec<f64>> = x.rows.iter().map(|r| model.transform(r).unwrap()).collect();
        for c in 0..model.k() {
            let mean: f64 = projections.iter().map(|p| p[c]).sum::<f64>() / n as f64;
            let var: f64 = projections.iter().map(|p| (p[c] - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
            let rel = (var - model.explained_variance[c]).abs() / model.explained_variance[c].max(1e-12);
            assert!(rel < 1e-6, "component {c}: {var} vs {}", model.explained_variance[c]);
        }
        for w in model.explained_variance.windows(2) {
            assert!(w[0] >= w[1] - 1e-12);
        }
    }

    #[test]
    fn pca_rejects_k_beyond_rank_bound() {
        let x = matrix(vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![2.0, 0.5]]);
        assert!(matches!(
            fit_pca(&x, 3),
            Err(FeatureError::RankTooSmall { k: 3, max: 2 })
        ));
        let degenerate = matrix(vec![vec![1.0, 1.0, 1.0], vec![1.0, 1.0, 1.0]]);
        assert!(fit_pca(&degenerate, 1).is_err());
    }

    #[test]
    fn pca_transform_checks_dimension() {
        let x = matrix(vec![vec![0.0, 0.0], vec![1.0, 1.0]]);
        let model = fit_pca(&x, 1).unwrap();
        assert!(matches!(
            model.transform(&[1.0, 2.0, 3.0]),
            Err(FeatureError::DimensionMismatch { expected: 2, got: 3 })
        ));
    }

    fn write_temp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn loads_embedding_records() {
        let f = write_temp(
            "{\"item_num\": 1, \"vector\": [0.1, 0.2]}\n{\"item_num\": 2, \"vector\": [0.3, 0.4]}\n",
        );
        let table = load_embeddings(f.path(), Some(2)).unwrap();
        assert_eq!(table.len(), 2);
        assert_eq!(table.get(1).unwrap(), &[0.1, 0.2]);
        assert_eq!(table.dim, 2);
    }

    #[test]
    fn embedding_dim_mismatch() {
        let f = write_temp("{\"item_num\": 1, \"vector\": [0.1, 0.2, 0.3, 0.4, 0.5]}\n");
        assert!(matches!(
            load_embeddings(f.path(), Some(768)),
            Err(FeatureError::DimensionMismatch { expected: 768, got: 5 })
        ));
    }

    #[test]
    fn embedding_duplicate_item() {
        let f = write_temp("{\"item_num\": 1, \"vector\": [0.1]}\n{\"item_num\": 1, \"vector\": [0.2]}\n");
        assert!(matches!(
            load_embeddings(f.path(), None),
            Err(FeatureError::DuplicateItem(1))
        ));
    }

    #[test]
    fn embedding_missing_vector_field() {
        let f = write_temp("{\"item_num\": 1}\n");
        assert!(matches!(
            load_embeddings(f.path(), None),
            Err(FeatureError::MissingVectorField { line: 1 })
        ));
    }

    #[test]
    fn feature_matrix_rejects_ragged_and_duplicate() {
        assert!(FeatureMatrix::new(vec![1, 2], vec![vec![1.0], vec![1.0, 2.0]]).is_err());
        assert!(matches!(
            FeatureMatrix::new(vec![1, 1], vec![vec![1.0], vec![2.0]]),
            Err(FeatureError::DuplicateItem(1))
        ));
    }
}
