//! On-disk dataset format: one JSON-lines file per split, with frames stored
//! as relative paths to raw little-endian binaries (header: T_in, d_in as
//! u32, then f64 data).

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{Corpus, Utterance};

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    id: String,
    tokens: Vec<String>,
    tags: Option<Vec<usize>>,
    label: Option<usize>,
    label2: Option<usize>,
    frames: Option<String>,
}

const FRAMES_DIR: &str = "frames";

fn write_frames_bin(path: &Path, frames: &Tensor) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let (t, d) = (frames.rows() as u32, frames.cols() as u32);
    w.write_all(&t.to_le_bytes()).map_err(|e| Error::io(path, e))?;
    w.write_all(&d.to_le_bytes()).map_err(|e| Error::io(path, e))?;
    for &v in frames.data() {
        w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_frames_bin(path: &Path) -> Result<Tensor> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf).map_err(|e| Error::io(path, e))?;
    let t = u32::from_le_bytes(u32buf) as usize;
    r.read_exact(&mut u32buf).map_err(|e| Error::io(path, e))?;
    let d = u32::from_le_bytes(u32buf) as usize;
    let mut data = Vec::with_capacity(t * d);
    let mut f64buf = [0u8; 8];
    for _ in 0..t * d {
        r.read_exact(&mut f64buf).map_err(|e| Error::io(path, e))?;
        data.push(f64::from_le_bytes(f64buf));
    }
    // the payload must end exactly here
    if r.read(&mut f64buf).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::Data(format!(
            "{}: trailing bytes after {t}x{d} frame payload",
            path.display()
        )));
    }
    Tensor::new(vec![t, d], data)
}

/// Write one split as `<name>.jsonl` plus per-utterance frame binaries.
pub fn save_split(dir: &Path, name: &str, utts: &[Utterance]) -> Result<()> {
    fs::create_dir_all(dir.join(FRAMES_DIR)).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(format!("{name}.jsonl"));
    let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(file);
    for utt in utts {
        utt.validate()?;
        let frames_rel = match &utt.frames {
            Some(frames) => {
                let rel = format!("{FRAMES_DIR}/{}.bin", utt.id);
                write_frames_bin(&dir.join(&rel), frames)?;
                Some(rel)
            }
            None => None,
        };
        let record = Record {
            id: utt.id.clone(),
            tokens: utt.tokens.clone(),
            tags: utt.tags.clone(),
            label: utt.label,
            label2: utt.label2,
            frames: frames_rel,
        };
        serde_json::to_writer(&mut w, &record)?;
        w.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

pub fn save_corpus(dir: &Path, corpus: &Corpus) -> Result<()> {
    save_split(dir, "train", &corpus.train)?;
    save_split(dir, "val", &corpus.val)?;
    save_split(dir, "test", &corpus.test)
}

/// Load `<dir>/<name>.jsonl`, resolving frame paths relative to `dir`.
pub fn load_split(dir: &Path, name: &str) -> Result<Vec<Utterance>> {
    load_records(&dir.join(format!("{name}.jsonl")))
}

/// Load a JSONL record file, resolving frame paths relative to its parent.
pub fn load_records(path: &Path) -> Result<Vec<Utterance>> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line)?;
        let frames = match record.frames {
            Some(rel) => Some(read_frames_bin(&dir.join(rel))?),
            None => None,
        };
        let utt = Utterance {
            id: record.id,
            frames,
            tokens: record.tokens,
            tags: record.tags,
            label: record.label,
            label2: record.label2,
        };
        utt.validate()?;
        out.push(utt);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen::{gen_corpus, Task};

    #[test]
    fn corpus_round_trips_through_disk_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = gen_corpus(Task::Sentiment, 40, 3).unwrap();
        save_corpus(dir.path(), &corpus).unwrap();
        let train = load_split(dir.path(), "train").unwrap();
        assert_eq!(train, corpus.train);
        let test = load_split(dir.path(), "test").unwrap();
        assert_eq!(test, corpus.test);
    }

    #[test]
    fn frames_binary_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = crate::rng::Rng::new(5);
        let frames = Tensor::randn(&[9, 8], 1.0, &mut rng);
        let path = dir.path().join("f.bin");
        write_frames_bin(&path, &frames).unwrap();
        let back = read_frames_bin(&path).unwrap();
        assert_eq!(back, frames);
    }

    #[test]
    fn truncated_frames_binary_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = crate::rng::Rng::new(5);
        let frames = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let path = dir.path().join("f.bin");
        write_frames_bin(&path, &frames).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(read_frames_bin(&path).is_err());
    }

    #[test]
    fn save_is_deterministic() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let corpus = gen_corpus(Task::Punct, 40, 9).unwrap();
        save_corpus(d1.path(), &corpus).unwrap();
        save_corpus(d2.path(), &corpus).unwrap();
        for name in ["train.jsonl", "val.jsonl", "test.jsonl"] {
            let a = std::fs::read(d1.path().join(name)).unwrap();
            let b = std::fs::read(d2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs");
        }
    }
}
