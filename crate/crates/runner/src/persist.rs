//! Run-directory layout and the binary matrix exchange format.
//!
//! Blocks are little-endian f64, row-major, one file per block; their shape
//! and sha256 live in the owning `snapshot.toml`.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use crhlab_core::linalg::SymMatrix;
use crhlab_core::netcore::{Activation, Linear, MlpModel, OptimizerState};
use crhlab_core::probes::{ConjugateSet, MomentMode};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{RunnerError, RunnerResult};

pub const MANIFEST: &str = "manifest.toml";
pub const STATUS: &str = "status.toml";
pub const SNAPSHOTS: &str = "snapshots";
pub const SNAPSHOT_INDEX: &str = "snapshot.toml";

pub const MODES: [MomentMode; 2] = [MomentMode::Raw, MomentMode::CenteredNormalized];

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub sha256: String,
}

/// A named dense block.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Block {
    pub fn from_array(name: impl Into<String>, a: &Array2<f64>) -> Self {
        let (rows, cols) = a.dim();
        Self { name: name.into(), rows, cols, data: a.iter().copied().collect() }
    }

    pub fn from_sym(name: impl Into<String>, a: &SymMatrix<f64>) -> Self {
        Self::from_array(name, a.as_array())
    }

    pub fn scalars(name: impl Into<String>, values: &[f64]) -> Self {
        Self { name: name.into(), rows: 1, cols: values.len(), data: values.to_vec() }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn into_array(self) -> Array2<f64> {
        Array2::from_shape_vec((self.rows, self.cols), self.data).expect("block shape matches data")
    }
}

pub fn write_block(dir: &Path, block: &Block) -> RunnerResult<BlockEntry> {
    let bytes = block.to_bytes();
    let path = dir.join(format!("{}.bin", block.name));
    fs::write(&path, &bytes).map_err(|e| RunnerError::io(&path, e))?;
    Ok(BlockEntry { name: block.name.clone(), rows: block.rows, cols: block.cols, sha256: sha256_hex(&bytes) })
}

pub fn read_block(dir: &Path, entry: &BlockEntry) -> RunnerResult<Block> {
    let path = dir.join(format!("{}.bin", entry.name));
    let bytes = fs::read(&path).map_err(|e| RunnerError::io(&path, e))?;
    if bytes.len() != entry.rows * entry.cols * 8 {
        return Err(RunnerError::corrupt(&path, format!("expected {}x{} f64 values, found {} bytes", entry.rows, entry.cols, bytes.len())));
    }
    if sha256_hex(&bytes) != entry.sha256 {
        return Err(RunnerError::corrupt(&path, "checksum mismatch"));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok(Block { name: entry.name.clone(), rows: entry.rows, cols: entry.cols, data })
}

/// Persisted training state plus both conjugate sets of every layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSnapshot {
    pub step: u64,
    /// Loss on the last training batch before this step; NaN at step 0.
    pub train_loss: f64,
    pub eval_loss: f64,
    /// Per layer, indexed like [`MODES`].
    pub sets: Vec<[ConjugateSet<f64>; 2]>,
    pub model: MlpModel<f64>,
    pub optimizer: OptimizerState<f64>,
}

impl RunSnapshot {
    pub fn set(&self, layer: usize, mode: MomentMode) -> &ConjugateSet<f64> {
        &self.sets[layer][mode_index(mode)]
    }
}

pub fn mode_index(mode: MomentMode) -> usize {
    match mode {
        MomentMode::Raw => 0,
        MomentMode::CenteredNormalized => 1,
    }
}

fn mode_tag(mode: MomentMode) -> &'static str {
    match mode {
        MomentMode::Raw => "raw",
        MomentMode::CenteredNormalized => "cn",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SnapshotIndex {
    step: u64,
    optimizer_step: u64,
    layers: usize,
    samples: Vec<usize>,
    blocks: Vec<BlockEntry>,
}

const SET_KEYS: [&str; 8] = ["Ha", "Ga", "Za", "Hb", "Gb", "Zb", "Xf", "Xb"];

fn set_blocks(layer: usize, set: &ConjugateSet<f64>) -> Vec<Block> {
    let tag = mode_tag(set.mode);
    let mats = [&set.h_a, &set.g_a, &set.z_a, &set.h_b, &set.g_b, &set.z_b, &set.cross_f, &set.cross_b];
    let mut blocks: Vec<Block> = SET_KEYS
        .iter()
        .zip(mats)
        .map(|(k, m)| Block::from_sym(format!("L{layer}.{tag}.{k}"), m))
        .collect();
    blocks.push(Block::scalars(
        format!("L{layer}.{tag}.scalars"),
        &[set.norm_gb, set.norm_ha, set.asymmetry_f, set.asymmetry_b],
    ));
    blocks
}

pub fn snapshot_dir(run_dir: &Path, step: u64) -> PathBuf {
    run_dir.join(SNAPSHOTS).join(format!("step-{step}"))
}

/// Writes the snapshot into a temporary directory and renames it into place,
/// so a present `step-N` directory is always complete.
pub fn write_snapshot(run_dir: &Path, snap: &RunSnapshot) -> RunnerResult<PathBuf> {
    let root = run_dir.join(SNAPSHOTS);
    fs::create_dir_all(&root).map_err(|e| RunnerError::io(&root, e))?;
    let tmp = root.join(format!(".tmp-step-{}", snap.step));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| RunnerError::io(&tmp, e))?;
    }
    fs::create_dir(&tmp).map_err(|e| RunnerError::io(&tmp, e))?;

    let mut blocks = Vec::new();
    for (layer, pair) in snap.sets.iter().enumerate() {
        for set in pair {
            blocks.extend(set_blocks(layer, set));
        }
    }
    for (k, l) in snap.model.layers().iter().enumerate() {
        blocks.push(Block::from_array(format!("W{k}"), &l.weight));
        if let Some(b) = &l.bias {
            blocks.push(Block::scalars(format!("b{k}"), &b.to_vec()));
        }
        blocks.push(Block::from_array(format!("opt{k}.first"), &snap.optimizer.first[k]));
        blocks.push(Block::from_array(format!("opt{k}.second"), &snap.optimizer.second[k]));
    }
    blocks.push(Block::scalars("losses", &[snap.train_loss, snap.eval_loss]));

    let entries = blocks.iter().map(|b| write_block(&tmp, b)).collect::<RunnerResult<Vec<_>>>()?;
    let index = SnapshotIndex {
        step: snap.step,
        optimizer_step: snap.optimizer.step,
        layers: snap.sets.len(),
        samples: snap.sets.iter().map(|p| p[0].samples).collect(),
        blocks: entries,
    };
    let path = tmp.join(SNAPSHOT_INDEX);
    let text = toml::to_string(&index).expect("index serializes");
    fs::write(&path, text).map_err(|e| RunnerError::io(&path, e))?;

    let dest = snapshot_dir(run_dir, snap.step);
    if dest.exists() {
        fs::remove_dir_all(&dest).map_err(|e| RunnerError::io(&dest, e))?;
    }
    fs::rename(&tmp, &dest).map_err(|e| RunnerError::io(&dest, e))?;
    Ok(dest)
}

pub fn read_snapshot(dir: &Path, activation: Activation) -> RunnerResult<RunSnapshot> {
    let path = dir.join(SNAPSHOT_INDEX);
    let text = fs::read_to_string(&path).map_err(|e| RunnerError::io(&path, e))?;
    let index: SnapshotIndex = toml::from_str(&text).map_err(|e| RunnerError::corrupt(&path, e.to_string()))?;
    let mut blocks = std::collections::HashMap::new();
    for entry in &index.blocks {
        blocks.insert(entry.name.clone(), read_block(dir, entry)?);
    }
    let mut take = |name: &str| -> RunnerResult<Block> {
        blocks.remove(name).ok_or_else(|| RunnerError::corrupt(&path, format!("missing block {name}")))
    };
    let sym = |b: Block| -> RunnerResult<SymMatrix<f64>> {
        let n = b.rows;
        SymMatrix::from_row_major(n, b.data).map_err(RunnerError::from)
    };

    let mut layers = Vec::with_capacity(index.layers);
    for k in 0..index.layers {
        let weight = take(&format!("W{k}"))?.into_array();
        let bias = take(&format!("b{k}")).ok().map(|b| ndarray::Array1::from(b.data));
        layers.push(Linear { weight, bias });
    }
    let model = MlpModel::new(layers, activation)?;
    let mut first = Vec::new();
    let mut second = Vec::new();
    for k in 0..index.layers {
        first.push(take(&format!("opt{k}.first"))?.into_array());
        second.push(take(&format!("opt{k}.second"))?.into_array());
    }
    let optimizer = OptimizerState { step: index.optimizer_step, first, second };

    let mut sets = Vec::with_capacity(index.layers);
    for layer in 0..index.layers {
        let mut pair = Vec::with_capacity(2);
        for mode in MODES {
            let tag = mode_tag(mode);
            let mut m = Vec::with_capacity(8);
            for key in SET_KEYS {
                m.push(sym(take(&format!("L{layer}.{tag}.{key}"))?)?);
            }
            let s = take(&format!("L{layer}.{tag}.scalars"))?.data;
            if s.len() != 4 {
                return Err(RunnerError::corrupt(&path, "scalar block must hold 4 values"));
            }
            let mut m = m.into_iter();
            let mut next = || m.next().expect("eight matrices");
            pair.push(ConjugateSet {
                layer_index: layer,
                mode,
                samples: *index.samples.get(layer).unwrap_or(&0),
                h_a: next(),
                g_a: next(),
                z_a: next(),
                h_b: next(),
                g_b: next(),
                z_b: next(),
                cross_f: next(),
                cross_b: next(),
                norm_gb: s[0],
                norm_ha: s[1],
                asymmetry_f: s[2],
                asymmetry_b: s[3],
            });
        }
        let b = pair.pop().expect("two modes");
        let a = pair.pop().expect("two modes");
        sets.push([a, b]);
    }
    let losses = take("losses")?.data;
    Ok(RunSnapshot {
        step: index.step,
        train_loss: losses[0],
        eval_loss: losses[1],
        sets,
        model,
        optimizer,
    })
}

/// Snapshot steps present under `run_dir`, ascending; temporary directories
/// are ignored.
pub fn snapshot_steps(run_dir: &Path) -> RunnerResult<Vec<u64>> {
    let root = run_dir.join(SNAPSHOTS);
    if !root.exists() {
        return Ok(Vec::new());
    }
    let mut steps = Vec::new();
    for entry in fs::read_dir(&root).map_err(|e| RunnerError::io(&root, e))? {
        let entry = entry.map_err(|e| RunnerError::io(&root, e))?;
        let name = entry.file_name();
        if let Some(n) = name.to_str().and_then(|s| s.strip_prefix("step-")).and_then(|s| s.parse().ok()) {
            steps.push(n);
        }
    }
    steps.sort_unstable();
    Ok(steps)
}

/// Run outcome recorded next to the manifest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunState {
    Running,
    Halted,
    Complete,
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Status {
    pub state: RunState,
    pub last_step: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

pub fn write_status(run_dir: &Path, status: &Status) -> RunnerResult<()> {
    write_atomic(&run_dir.join(STATUS), &toml::to_string(status).expect("status serializes"))
}

pub fn read_status(run_dir: &Path) -> RunnerResult<Option<Status>> {
    let path = run_dir.join(STATUS);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| RunnerError::io(&path, e))?;
    toml::from_str(&text).map(Some).map_err(|e| RunnerError::corrupt(&path, e.to_string()))
}

pub fn write_atomic(path: &Path, text: &str) -> RunnerResult<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text).map_err(|e| RunnerError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| RunnerError::io(path, e))
}

/// Appends records to a CSV file, writing `header` first when the file is new.
pub fn append_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> RunnerResult<()> {
    let fresh = !path.exists();
    let file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| RunnerError::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    if fresh {
        w.write_record(header).map_err(|e| RunnerError::csv(path, e))?;
    }
    for r in rows {
        w.write_record(r).map_err(|e| RunnerError::csv(path, e))?;
    }
    w.flush().map_err(|e| RunnerError::io(path, e))
}

/// Drops every data row whose leading step column exceeds `step`.
pub fn truncate_csv(path: &Path, step: u64) -> RunnerResult<()> {
    if !path.exists() {
        return Ok(());
    }
    let file = fs::File::open(path).map_err(|e| RunnerError::io(path, e))?;
    let mut kept = String::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| RunnerError::io(path, e))?;
        let keep = i == 0
            || line
                .split(',')
                .next()
                .and_then(|s| s.parse::<u64>().ok())
                .is_some_and(|s| s <= step);
        if keep {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    write_atomic(path, &kept)
}

pub fn read_csv(path: &Path) -> RunnerResult<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| RunnerError::csv(path, e))?;
    let header = r.headers().map_err(|e| RunnerError::csv(path, e))?.iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|r| r.iter().map(String::from).collect()))
        .collect::<Result<Vec<Vec<String>>, _>>()
        .map_err(|e| RunnerError::csv(path, e))?;
    Ok((header, rows))
}

pub fn file_sha256(path: &Path) -> RunnerResult<String> {
    let bytes = fs::read(path).map_err(|e| RunnerError::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

pub fn write_text(path: &Path, text: &str) -> RunnerResult<()> {
    let mut f = fs::File::create(path).map_err(|e| RunnerError::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| RunnerError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crhlab_core::netcore::init_mlp;
    use crhlab_core::probes::conjugate_set;
    use crhlab_core::netcore::{Loss, Targets};
    use ndarray::Array2;

    fn snapshot() -> RunSnapshot {
        let model = init_mlp::<f64>(&[3, 4, 2], Activation::Tanh, true, 5).unwrap();
        let x = Array2::from_shape_fn((16, 3), |(i, j)| ((i * 3 + j) as f64 * 0.37).sin());
        let y = Array2::from_shape_fn((16, 2), |(i, j)| ((i + j) as f64 * 0.11).cos());
        let rec = model.forward_capture(x.view()).unwrap();
        let back = model.backward_capture(&rec, &Targets::Regression(y), Loss::Mse).unwrap();
        let sets = (0..model.depth())
            .map(|l| MODES.map(|m| conjugate_set(&model, &back.tapes, l, m).unwrap()))
            .collect();
        let mut optimizer = OptimizerState::new(&model);
        optimizer.step = 7;
        optimizer.first[1][[0, 1]] = 0.25;
        RunSnapshot { step: 7, train_loss: f64::NAN, eval_loss: back.loss.value, sets, model, optimizer }
    }

    #[test]
    fn snapshot_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let s = snapshot();
        let path = write_snapshot(dir.path(), &s).unwrap();
        let r = read_snapshot(&path, Activation::Tanh).unwrap();
        assert!(r.train_loss.is_nan());
        assert_eq!(r.eval_loss.to_bits(), s.eval_loss.to_bits());
        assert_eq!(r.sets, s.sets);
        assert_eq!(r.model, s.model);
        assert_eq!(r.optimizer, s.optimizer);
        assert_eq!(snapshot_steps(dir.path()).unwrap(), vec![7]);
    }

    #[test]
    fn corrupted_block_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_snapshot(dir.path(), &snapshot()).unwrap();
        let block = path.join("W0.bin");
        let mut bytes = fs::read(&block).unwrap();
        bytes[0] ^= 1;
        fs::write(&block, bytes).unwrap();
        let err = read_snapshot(&path, Activation::Tanh).unwrap_err().to_string();
        assert!(err.contains("checksum"), "{err}");
    }

    #[test]
    fn csv_truncation_keeps_header_and_early_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        let rows: Vec<Vec<String>> = [0u64, 10, 20].iter().map(|s| vec![s.to_string(), "x".into()]).collect();
        append_csv(&p, &["step", "v"], &rows).unwrap();
        truncate_csv(&p, 10).unwrap();
        let (h, r) = read_csv(&p).unwrap();
        assert_eq!(h, vec!["step", "v"]);
        assert_eq!(r.len(), 2);
    }
}
