use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ProcessedAction, SampleRecord, FRAME_WIDTH};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonRecord {
    caption: String,
    actions: Vec<Vec<Vec<f64>>>,
    mask: Vec<Vec<bool>>,
}

impl JsonRecord {
    fn from_record(r: &SampleRecord) -> Self {
        JsonRecord {
            caption: r.caption.clone(),
            actions: r
                .actions
                .iter()
                .map(|a| a.frames().map(<[f64]>::to_vec).collect())
                .collect(),
            mask: r.actions.iter().map(|a| vec![true; a.len()]).collect(),
        }
    }

    fn into_record(self) -> std::result::Result<SampleRecord, String> {
        if self.mask.len() != self.actions.len() {
            return Err("mask and actions differ in length".into());
        }
        if self.actions.is_empty() {
            return Err("record has no actions".into());
        }
        let mut actions = Vec::with_capacity(self.actions.len());
        for (frames, mask) in self.actions.into_iter().zip(self.mask) {
            if frames.len() != mask.len() {
                return Err("mask length differs from action length".into());
            }
            // valid frames form a prefix; the rest is padding
            let valid = mask.iter().take_while(|&&v| v).count();
            if mask[valid..].iter().any(|&v| v) || valid == 0 {
                return Err("mask must be a non-empty prefix of valid frames".into());
            }
            if let Some(f) = frames.iter().find(|f| f.len() != FRAME_WIDTH) {
                return Err(format!("frame has {} values, expected {FRAME_WIDTH}", f.len()));
            }
            let action = ProcessedAction::from_frames(&frames[..valid]).map_err(|e| e.to_string())?;
            actions.push(action);
        }
        Ok(SampleRecord {
            caption: self.caption,
            actions,
        })
    }
}

/// One JSON object per line. Floats are written in shortest round-trip form,
/// so reloading is exact.
pub fn save_jsonl(dataset: &[SampleRecord], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in dataset {
        serde_json::to_writer(&mut w, &JsonRecord::from_record(r))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_jsonl(path: &Path) -> Result<Vec<SampleRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse { line: n + 1, msg };
        let rec: JsonRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        out.push(rec.into_record().map_err(parse_err)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dataset(seed: u64) -> Vec<SampleRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..3)
            .map(|i| SampleRecord {
                caption: format!("A waves at B {i}"),
                actions: (0..2)
                    .map(|k| {
                        let data = (0..(k + 2) * FRAME_WIDTH)
                            .map(|_| rng.random::<f64>() * 1e3 - 500.0)
                            .collect();
                        ProcessedAction::from_flat(data).unwrap()
                    })
                    .collect(),
            })
            .collect()
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let ds = dataset(1);
        save_jsonl(&ds, &path).unwrap();
        assert_eq!(load_jsonl(&path).unwrap(), ds);
    }

    #[test]
    fn empty_dataset_is_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        save_jsonl(&[], &path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap().len(), 0);
        assert!(load_jsonl(&path).unwrap().is_empty());
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        save_jsonl(&dataset(2)[..1], &path).unwrap();
        let mut text = std::fs::read_to_string(&path).unwrap();
        text.push_str("{\"caption\": 3}\n");
        std::fs::write(&path, text).unwrap();
        match load_jsonl(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn masked_tail_is_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let frame = vec![0.5; FRAME_WIDTH];
        let line = serde_json::json!({
            "caption": "B bows",
            "actions": [[frame.clone(), frame.clone(), frame]],
            "mask": [[true, true, false]],
        });
        std::fs::write(&path, format!("{line}\n")).unwrap();
        let ds = load_jsonl(&path).unwrap();
        assert_eq!(ds[0].actions[0].len(), 2);
    }
}
