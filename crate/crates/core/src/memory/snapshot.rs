//! JSON-lines snapshot format.
//!
//! ```text
//! {"version":1,"dim":64,"horizon":8,"gripper_mode":"continuous"}
//! {"episode":3,"t":0,"task":"T2","key":[...],"dp":[[x,y,z],...],"dr":[[x,y,z],...],"g":[...]}
//! ```
//!
//! Every line, including the last, ends with `\n`; a missing final newline
//! is reported as truncation.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{MemoryEntry, RetrievalKey, SuccessMemory};
use crate::action_space::{ActionChunk, ActionStep, GripperMode, Vec3};
use crate::error::{invalid, Error, Result};

const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    dim: usize,
    horizon: usize,
    gripper_mode: GripperMode,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EntryLine {
    episode: u64,
    t: usize,
    task: String,
    key: Vec<f64>,
    dp: Vec<[f64; 3]>,
    dr: Vec<[f64; 3]>,
    g: Vec<f64>,
}

impl EntryLine {
    fn from_entry(e: &MemoryEntry) -> Self {
        Self {
            episode: e.episode_id,
            t: e.timestep,
            task: e.task_id.clone(),
            key: e.key.as_slice().to_vec(),
            dp: e.chunk.steps.iter().map(|s| s.dp.into()).collect(),
            dr: e.chunk.steps.iter().map(|s| s.dr.into()).collect(),
            g: e.chunk.steps.iter().map(|s| s.g).collect(),
        }
    }

    fn into_entry(self, header: &Header) -> Result<MemoryEntry> {
        if self.key.len() != header.dim {
            return Err(invalid(format!("key has {} values, header says {}", self.key.len(), header.dim)));
        }
        if self.dp.len() != header.horizon || self.dr.len() != header.horizon || self.g.len() != header.horizon {
            return Err(invalid(format!("chunk components do not all have horizon {}", header.horizon)));
        }
        let key = RetrievalKey::new(self.key)?;
        let steps = self
            .dp
            .iter()
            .zip(&self.dr)
            .zip(&self.g)
            .map(|((dp, dr), &g)| ActionStep::new(Vec3::from(*dp), Vec3::from(*dr), g))
            .collect();
        let chunk = ActionChunk::new(steps);
        chunk.validate(header.gripper_mode)?;
        Ok(MemoryEntry {
            key,
            chunk,
            episode_id: self.episode,
            timestep: self.t,
            task_id: self.task,
        })
    }
}

fn parse_err(path: &Path, line: usize, message: impl fmt::Display) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.to_string(),
    }
}

/// Writes `memory` to `path`, replacing any existing file only once the new
/// contents are fully written.
pub fn save_snapshot(memory: &SuccessMemory, path: &Path) -> Result<()> {
    let tmp = tmp_path(path);
    {
        let mut out = BufWriter::new(fs::File::create(&tmp)?);
        let header = Header {
            version: VERSION,
            dim: memory.dim(),
            horizon: memory.horizon(),
            gripper_mode: memory.gripper_mode(),
        };
        writeln!(out, "{}", to_json(&header)?)?;
        for e in memory.entries() {
            writeln!(out, "{}", to_json(&EntryLine::from_entry(e))?)?;
        }
        out.into_inner().map_err(|e| e.into_error())?.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string(value).map_err(|e| invalid(e.to_string()))
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}

fn read_lines(path: &Path) -> Result<(String, Vec<(usize, String)>)> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.to_string()));
    let Some((_, header)) = lines.next() else {
        return Err(parse_err(path, 1, "empty file, expected header line"));
    };
    let rest: Vec<_> = lines.collect();
    if !text.ends_with('\n') {
        let last = rest.last().map_or(1, |(n, _)| *n);
        return Err(parse_err(path, last, "file truncated (missing final newline)"));
    }
    Ok((header, rest))
}

fn parse_header(path: &Path, line: &str) -> Result<Header> {
    let header: Header = serde_json::from_str(line).map_err(|e| parse_err(path, 1, format!("bad header: {e}")))?;
    if header.version != VERSION {
        return Err(parse_err(path, 1, format!("unsupported snapshot version {}", header.version)));
    }
    Ok(header)
}

/// Loads a snapshot. Any malformed or invalid line aborts the load; the
/// returned memory has unlimited capacity.
pub fn load_snapshot(path: &Path) -> Result<SuccessMemory> {
    let (header_line, lines) = read_lines(path)?;
    let header = parse_header(path, &header_line)?;
    let mut memory = SuccessMemory::new(None, header.dim, header.horizon, header.gripper_mode);
    for (n, line) in lines {
        let parsed: EntryLine = serde_json::from_str(&line).map_err(|e| parse_err(path, n, e))?;
        let entry = parsed.into_entry(&header).map_err(|e| parse_err(path, n, e))?;
        memory.push(entry).map_err(|e| parse_err(path, n, e))?;
    }
    Ok(memory)
}

impl SuccessMemory {
    /// Fails with [`Error::Incompatible`] unless the memory matches the
    /// given deployment shape.
    pub fn check_compatible(&self, dim: usize, horizon: usize, gripper_mode: GripperMode) -> Result<()> {
        if self.dim != dim || self.horizon != horizon || self.gripper_mode != gripper_mode {
            return Err(Error::Incompatible(format!(
                "snapshot has dim {} horizon {} gripper {}, deployment expects dim {dim} horizon {horizon} gripper {}",
                self.dim,
                self.horizon,
                self.gripper_mode.as_str(),
                gripper_mode.as_str()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct SnapshotReport {
    pub entries: usize,
    pub per_task: BTreeMap<String, usize>,
    pub episode_range: Option<(u64, u64)>,
    pub dim: usize,
    pub horizon: usize,
    pub gripper_mode: GripperMode,
    /// `(line, message)` for every line that violates an invariant.
    pub violations: Vec<(usize, String)>,
}

impl fmt::Display for SnapshotReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "entries:      {}", self.entries)?;
        writeln!(f, "key dim:      {}", self.dim)?;
        writeln!(f, "horizon:      {}", self.horizon)?;
        writeln!(f, "gripper mode: {}", self.gripper_mode.as_str())?;
        match self.episode_range {
            Some((lo, hi)) => writeln!(f, "episodes:     {lo}..={hi}")?,
            None => writeln!(f, "episodes:     none")?,
        }
        for (task, n) in &self.per_task {
            writeln!(f, "  task {task}: {n}")?;
        }
        if self.violations.is_empty() {
            write!(f, "violations:   none")
        } else {
            write!(f, "violations:   {}", self.violations.len())?;
            for (line, msg) in &self.violations {
                write!(f, "\n  line {line}: {msg}")?;
            }
            Ok(())
        }
    }
}

/// Reads a snapshot leniently and reports counts plus every invariant
/// violation with its line number. Only an unreadable header is fatal.
pub fn inspect_snapshot(path: &Path) -> Result<SnapshotReport> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let Some((_, header_line)) = lines.next() else {
        return Err(parse_err(path, 1, "empty file, expected header line"));
    };
    let header = parse_header(path, header_line)?;
    let mut report = SnapshotReport {
        dim: header.dim,
        horizon: header.horizon,
        gripper_mode: header.gripper_mode,
        ..Default::default()
    };
    let mut last_line = 1;
    let mut last_pos: BTreeMap<u64, usize> = BTreeMap::new();
    for (n, line) in lines {
        last_line = n;
        let parsed: EntryLine = match serde_json::from_str(line) {
            Ok(p) => p,
            Err(e) => {
                report.violations.push((n, format!("unparseable entry: {e}")));
                continue;
            }
        };
        let (episode, t) = (parsed.episode, parsed.t);
        match parsed.into_entry(&header) {
            Ok(e) => {
                report.entries += 1;
                *report.per_task.entry(e.task_id).or_default() += 1;
                report.episode_range = Some(match report.episode_range {
                    None => (episode, episode),
                    Some((lo, hi)) => (lo.min(episode), hi.max(episode)),
                });
                if let Some(prev) = last_pos.insert(episode, t) {
                    if t <= prev {
                        report
                            .violations
                            .push((n, format!("episode {episode}: timestep {t} not after {prev}")));
                    }
                }
            }
            Err(e) => report.violations.push((n, e.to_string())),
        }
    }
    if !text.ends_with('\n') {
        report.violations.push((last_line, "file truncated (missing final newline)".into()));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_memory(n: usize, seed: u64) -> SuccessMemory {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = SuccessMemory::new(None, 16, 4, GripperMode::Continuous);
        for i in 0..n {
            let raw: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
            let key = RetrievalKey::new(raw.iter().map(|v| v / norm).collect()).unwrap();
            let steps = (0..4)
                .map(|_| {
                    let dp = Vec3::new(rng.random(), rng.random(), rng.random()) * 3.0;
                    let dr = Vec3::new(rng.random(), rng.random(), rng.random()) * 0.2;
                    ActionStep::new(dp, dr, rng.random())
                })
                .collect();
            m.push(MemoryEntry {
                key,
                chunk: ActionChunk::new(steps),
                episode_id: (i / 7) as u64,
                timestep: i % 7,
                task_id: if i % 3 == 0 { "T1".into() } else { "T2".into() },
            })
            .unwrap();
        }
        m
    }

    #[test]
    fn empty_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let m = SuccessMemory::new(Some(10), 64, 8, GripperMode::Continuous);
        save_snapshot(&m, &p).unwrap();
        let back = load_snapshot(&p).unwrap();
        assert!(back.is_empty());
        assert_eq!(back.dim(), 64);
        let r = inspect_snapshot(&p).unwrap();
        assert_eq!(r.entries, 0);
        assert!(r.violations.is_empty());
    }

    #[test]
    fn random_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let m = random_memory(100, 3);
        save_snapshot(&m, &p).unwrap();
        let back = load_snapshot(&p).unwrap();
        assert_eq!(back, m);
        let r = inspect_snapshot(&p).unwrap();
        assert_eq!(r.entries, 100);
        assert_eq!(r.per_task["T1"], 34);
        assert_eq!(r.episode_range, Some((0, 14)));
    }

    #[test]
    fn truncation_detected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        save_snapshot(&random_memory(5, 1), &p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        fs::write(&p, &text[..text.len() - 40]).unwrap();
        match load_snapshot(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 6),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn non_unit_key_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        save_snapshot(&random_memory(3, 2), &p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let mut v: serde_json::Value = serde_json::from_str(&lines[2]).unwrap();
        v["key"][0] = serde_json::json!(5.0);
        lines[2] = v.to_string();
        fs::write(&p, lines.join("\n") + "\n").unwrap();
        let r = inspect_snapshot(&p).unwrap();
        assert_eq!(r.entries, 2);
        assert_eq!(r.violations.len(), 1);
        assert_eq!(r.violations[0].0, 3);
        assert!(matches!(load_snapshot(&p), Err(Error::Parse { line: 3, .. })));
    }

    #[test]
    fn incompatible_shape() {
        let m = random_memory(1, 0);
        assert!(m.check_compatible(16, 4, GripperMode::Continuous).is_ok());
        assert!(matches!(
            m.check_compatible(64, 4, GripperMode::Continuous),
            Err(Error::Incompatible(_))
        ));
    }
}
