//! Instance construction: manifests, schema-aware gold action extraction,
//! candidate value lists, and a WER-calibrated transcript noise injector.

use crate::eval;
use crate::features::{
    extract_logmel, synth_pseudo_speech, FeatureError, PseudoTtsConfig, SpeechFeatures, Waveform,
};
use crate::schema::{Schema, SchemaStore};
use crate::semql::{extract_literals, sql_to_actions, ActionSequence, Grammar, SemqlError};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("unknown db_id {0:?}")]
    UnknownDbId(String),
    #[error("instance {id}: {source}")]
    BadSql {
        id: String,
        #[source]
        source: SemqlError,
    },
    #[error("instance {id}: {source}")]
    BadAudio {
        id: String,
        #[source]
        source: FeatureError,
    },
    #[error("empty transcript")]
    EmptyTranscript,
    #[error("manifest line {line}: {reason}")]
    BadManifest { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One line of a JSON-lines manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub db_id: String,
    /// Either a path to a feature/WAV file (relative to the manifest) or
    /// `pseudo:<space-separated tokens>` for on-the-fly synthesis.
    pub audio: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub transcript: Option<String>,
    pub sql: String,
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestRecord>, DatasetError> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let rec: ManifestRecord =
            serde_json::from_str(line).map_err(|e| DatasetError::BadManifest {
                line: i + 1,
                reason: e.to_string(),
            })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_manifest(records: &[ManifestRecord], path: &Path) -> Result<(), DatasetError> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("record serializes"));
        s.push('\n');
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// A fully constructed training/evaluation instance.
#[derive(Debug, Clone)]
pub struct Instance {
    pub id: String,
    pub features: SpeechFeatures,
    pub db_id: String,
    pub transcript: Option<Vec<String>>,
    pub gold_sql: String,
    pub gold_actions: ActionSequence,
    pub candidate_values: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct BuildOptions {
    /// Distractor literals added to the candidate list.
    pub n_distractors: usize,
    pub seed: u64,
    pub tts: PseudoTtsConfig,
    /// Base directory for relative audio paths.
    pub base_dir: PathBuf,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            n_distractors: 8,
            seed: 0,
            tts: PseudoTtsConfig::default(),
            base_dir: PathBuf::from("."),
        }
    }
}

/// Fixed numeric portion of the distractor pool.
const NUMBER_POOL: [&str; 12] = [
    "0", "2", "3", "4", "5", "7", "8", "10", "20", "50", "100", "1000",
];
/// Word portion, drawn for text columns.
const WORD_POOL: [&str; 14] = [
    "red", "blue", "green", "yellow", "small", "large", "north", "south", "east", "west",
    "spring", "summer", "autumn", "winter",
];

/// Literal pool a schema's cells could plausibly hold, used for distractors.
fn schema_value_pool(schema: &Schema) -> Vec<String> {
    let mut pool: Vec<String> = NUMBER_POOL.iter().map(|s| s.to_string()).collect();
    let has_text = schema
        .tables
        .iter()
        .any(|t| t.columns.iter().any(|c| c.ty == crate::schema::ColumnType::Text));
    if has_text {
        pool.extend(WORD_POOL.iter().map(|s| s.to_string()));
    }
    pool
}

fn load_audio(
    audio: &str,
    base_dir: &Path,
    tts: &PseudoTtsConfig,
) -> Result<SpeechFeatures, FeatureError> {
    if let Some(tokens) = audio.strip_prefix("pseudo:") {
        let tokens: Vec<String> = tokens.split_whitespace().map(str::to_string).collect();
        synth_pseudo_speech(&tokens, tts)
    } else {
        let path = base_dir.join(audio);
        if path.extension().is_some_and(|e| e == "wav") {
            let w = Waveform::read_wav(&path)?;
            extract_logmel(&w, false)
        } else {
            SpeechFeatures::load(&path)
        }
    }
}

/// Build an instance: load features, derive the gold action sequence, and
/// assemble the candidate value list (gold literals plus seeded distractors,
/// shuffled deterministically per instance).
pub fn build_instance(
    record: &ManifestRecord,
    schema: &Schema,
    grammar: &Grammar,
    opts: &BuildOptions,
) -> Result<Instance, DatasetError> {
    let features = load_audio(&record.audio, &opts.base_dir, &opts.tts).map_err(|e| {
        DatasetError::BadAudio {
            id: record.id.clone(),
            source: e,
        }
    })?;
    let gold_literals = extract_literals(&record.sql, schema).map_err(|e| DatasetError::BadSql {
        id: record.id.clone(),
        source: e,
    })?;

    let mut seed = [0u8; 32];
    seed[..8].copy_from_slice(&opts.seed.to_le_bytes());
    let idh = crate::features::token_hash(&record.id);
    seed[8..16].copy_from_slice(&idh.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(seed);

    let pool = schema_value_pool(schema);
    let mut distractors: Vec<String> = pool
        .into_iter()
        .filter(|p| !gold_literals.iter().any(|g| g == p))
        .collect();
    distractors.shuffle(&mut rng);
    distractors.truncate(opts.n_distractors);

    let mut candidate_values = gold_literals;
    candidate_values.extend(distractors);
    candidate_values.shuffle(&mut rng);

    let gold_actions = sql_to_actions(&record.sql, schema, grammar, &candidate_values)
        .map_err(|e| DatasetError::BadSql {
            id: record.id.clone(),
            source: e,
        })?;

    let transcript = record
        .transcript
        .as_ref()
        .map(|t| t.split_whitespace().map(|w| w.to_ascii_lowercase()).collect());

    Ok(Instance {
        id: record.id.clone(),
        features,
        db_id: record.db_id.clone(),
        transcript,
        gold_sql: record.sql.clone(),
        gold_actions,
        candidate_values,
    })
}

/// Load a manifest and build every instance against the schema store.
pub fn load_dataset(
    manifest: &Path,
    store: &SchemaStore,
    grammar: &Grammar,
    opts: &BuildOptions,
) -> Result<Vec<Instance>, DatasetError> {
    let records = load_manifest(manifest)?;
    let mut opts = opts.clone();
    if let Some(dir) = manifest.parent() {
        opts.base_dir = dir.to_path_buf();
    }
    records
        .iter()
        .map(|r| {
            let schema = store
                .get(&r.db_id)
                .ok_or_else(|| DatasetError::UnknownDbId(r.db_id.clone()))?;
            build_instance(r, schema, grammar, &opts)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// ASR noise injection
// ---------------------------------------------------------------------------

/// Target word error rate and edit vocabulary for transcript corruption.
#[derive(Debug, Clone)]
pub struct NoiseSpec {
    pub target_wer: f64,
    pub seed: u64,
    pub vocabulary: Vec<String>,
    pub tolerance: f64,
}

impl NoiseSpec {
    pub fn new(target_wer: f64, seed: u64, vocabulary: Vec<String>) -> Self {
        assert!((0.0..=1.0).contains(&target_wer));
        Self {
            target_wer,
            seed,
            vocabulary,
            tolerance: 0.02,
        }
    }
}

fn apply_edits(
    transcript: &[String],
    n_edits: usize,
    vocab: &[String],
    rng: &mut ChaCha8Rng,
) -> Vec<String> {
    let len = transcript.len();
    // Substitution and insertion words avoid every transcript word so edits
    // cannot re-align into a cheaper path.
    let fresh: Vec<&String> = vocab
        .iter()
        .filter(|w| !transcript.contains(w))
        .collect();
    let pick_fresh = |rng: &mut ChaCha8Rng| -> String {
        if fresh.is_empty() {
            vocab[rng.gen_range(0..vocab.len())].clone()
        } else {
            fresh[rng.gen_range(0..fresh.len())].clone()
        }
    };

    let mut n_sub = 0;
    let mut n_del = 0;
    let mut n_ins = 0;
    for _ in 0..n_edits {
        match rng.gen_range(0..3) {
            0 => n_sub += 1,
            1 => n_del += 1,
            _ => n_ins += 1,
        }
    }
    // Substitutions and deletions act on distinct original positions.
    while n_sub + n_del > len {
        if n_del > 0 {
            n_del -= 1;
        } else {
            n_sub -= 1;
        }
        n_ins += 1;
    }
    let mut positions: Vec<usize> = (0..len).collect();
    positions.shuffle(rng);
    let sub_pos: std::collections::HashSet<usize> = positions[..n_sub].iter().copied().collect();
    let del_pos: std::collections::HashSet<usize> =
        positions[n_sub..n_sub + n_del].iter().copied().collect();

    let mut out: Vec<String> = Vec::with_capacity(len + n_ins);
    for (i, w) in transcript.iter().enumerate() {
        if del_pos.contains(&i) {
            continue;
        }
        if sub_pos.contains(&i) {
            out.push(pick_fresh(rng));
        } else {
            out.push(w.clone());
        }
    }
    for _ in 0..n_ins {
        let gap = rng.gen_range(0..=out.len());
        out.insert(gap, pick_fresh(rng));
    }
    out
}

/// Corrupt a transcript to a target WER with uniformly mixed substitutions,
/// deletions and insertions. The edit count is the nearest integer to
/// `target * len`; draws are retried (seeded) until the measured WER lands
/// within tolerance, keeping the closest draw otherwise.
pub fn inject_asr_noise(
    transcript: &[String],
    spec: &NoiseSpec,
) -> Result<Vec<String>, DatasetError> {
    if transcript.is_empty() {
        return Err(DatasetError::EmptyTranscript);
    }
    let len = transcript.len();
    let n_edits = (spec.target_wer * len as f64).round() as usize;
    if n_edits == 0 {
        return Ok(transcript.to_vec());
    }
    assert!(
        !spec.vocabulary.is_empty(),
        "noise injection needs a vocabulary"
    );

    let mut seed = [0u8; 32];
    seed[..8].copy_from_slice(&spec.seed.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(seed);

    let mut best: Option<(f64, Vec<String>)> = None;
    for _attempt in 0..50 {
        let out = apply_edits(transcript, n_edits, &spec.vocabulary, &mut rng);
        let measured = eval::wer(transcript, &out).expect("non-empty reference").wer;
        let dist = (measured - spec.target_wer).abs();
        if dist <= spec.tolerance {
            return Ok(out);
        }
        if best.as_ref().is_none_or(|(d, _)| dist < *d) {
            best = Some((dist, out));
        }
    }
    Ok(best.expect("at least one attempt").1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::semql::tests::{products_schema, wimmera_schema};
    use crate::semql::{actions_to_sql, Action};

    fn record(id: &str, db: &str, sql: &str, question: &str) -> ManifestRecord {
        ManifestRecord {
            id: id.into(),
            db_id: db.into(),
            audio: format!("pseudo:{question}"),
            transcript: Some(question.into()),
            sql: sql.into(),
        }
    }

    #[test]
    fn build_instance_includes_gold_literal() {
        let schema = wimmera_schema();
        let g = Grammar::builtin();
        let rec = record(
            "i1",
            "wimmera_db",
            "SELECT MIN(draws) FROM wimmera WHERE byes > 1",
            "what is the lowest draws with more than 1 byes",
        );
        let inst = build_instance(&rec, &schema, &g, &BuildOptions::default()).unwrap();
        assert!(inst.candidate_values.iter().any(|v| v == "1"));
        assert_eq!(inst.candidate_values.len(), 9); // 1 gold + 8 distractors
        // Every SelectValue index addresses the candidate list.
        for a in &inst.gold_actions {
            if let Action::SelectValue(i) = a {
                assert!(*i < inst.candidate_values.len());
            }
        }
        // And the gold actions round-trip to an equivalent query.
        let printed =
            actions_to_sql(&inst.gold_actions, &schema, &g, &inst.candidate_values).unwrap();
        let m = crate::eval::query_match(&printed, &inst.gold_sql, &schema);
        assert!(m.exact);
        // Features come from the pseudo synthesizer: 10 tokens x 4 frames.
        assert_eq!(inst.features.n_frames(), 40);
    }

    #[test]
    fn build_instance_deterministic() {
        let schema = products_schema();
        let g = Grammar::builtin();
        let rec = record(
            "i2",
            "products_db",
            "SELECT product_name FROM Products WHERE color_code = 2",
            "show the product name with color code 2",
        );
        let a = build_instance(&rec, &schema, &g, &BuildOptions::default()).unwrap();
        let b = build_instance(&rec, &schema, &g, &BuildOptions::default()).unwrap();
        assert_eq!(a.candidate_values, b.candidate_values);
        assert_eq!(a.gold_actions, b.gold_actions);
        let mut opts = BuildOptions::default();
        opts.seed = 7;
        let c = build_instance(&rec, &schema, &g, &opts).unwrap();
        assert_ne!(a.candidate_values, c.candidate_values);
    }

    #[test]
    fn unknown_column_surfaces() {
        let schema = wimmera_schema();
        let g = Grammar::builtin();
        let rec = record("i3", "wimmera_db", "SELECT zzz FROM wimmera", "show the zzz");
        let err = build_instance(&rec, &schema, &g, &BuildOptions::default()).unwrap_err();
        assert!(matches!(
            err,
            DatasetError::BadSql {
                source: SemqlError::UnknownColumn(_),
                ..
            }
        ));
    }

    #[test]
    fn manifest_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let recs = vec![
            record("a", "wimmera_db", "SELECT wins FROM wimmera", "show wins"),
            ManifestRecord {
                id: "b".into(),
                db_id: "wimmera_db".into(),
                audio: "feats/b.feat".into(),
                transcript: None,
                sql: "SELECT byes FROM wimmera".into(),
            },
        ];
        write_manifest(&recs, &path).unwrap();
        let back = load_manifest(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].id, "a");
        assert_eq!(back[1].transcript, None);
        assert_eq!(back[1].audio, "feats/b.feat");
    }

    fn vocab() -> Vec<String> {
        (0..200).map(|i| format!("w{i}")).collect()
    }

    #[test]
    fn noise_zero_target_is_identity() {
        let t: Vec<String> = (0..30).map(|i| format!("t{i}")).collect();
        let spec = NoiseSpec::new(0.0, 5, vocab());
        assert_eq!(inject_asr_noise(&t, &spec).unwrap(), t);
    }

    #[test]
    fn noise_is_deterministic_and_calibrated() {
        let t: Vec<String> = (0..100).map(|i| format!("t{i}")).collect();
        let spec = NoiseSpec::new(0.33, 7, vocab());
        let a = inject_asr_noise(&t, &spec).unwrap();
        let b = inject_asr_noise(&t, &spec).unwrap();
        assert_eq!(a, b);
        let measured = eval::wer(&t, &a).unwrap().wer;
        assert!(
            (0.31..=0.35).contains(&measured),
            "measured WER {measured}"
        );
    }

    #[test]
    fn noise_empty_transcript_rejected() {
        let spec = NoiseSpec::new(0.1, 1, vocab());
        assert!(matches!(
            inject_asr_noise(&[], &spec),
            Err(DatasetError::EmptyTranscript)
        ));
    }

    #[test]
    fn noise_mean_wer_over_many_sentences() {
        let v = vocab();
        for target in [0.1, 0.33, 0.5] {
            let mut total = 0.0;
            let n = 300;
            for k in 0..n {
                let len = 20 + (k % 11);
                let t: Vec<String> = (0..len).map(|i| format!("s{k}_{i}")).collect();
                let spec = NoiseSpec::new(target, k as u64, v.clone());
                let out = inject_asr_noise(&t, &spec).unwrap();
                total += eval::wer(&t, &out).unwrap().wer;
            }
            let mean = total / n as f64;
            assert!(
                (mean - target).abs() <= 0.02,
                "target {target} mean {mean}"
            );
        }
    }
}
