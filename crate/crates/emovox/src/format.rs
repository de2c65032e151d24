//! On-disk formats for mel spectrograms, utterances and corpus directories.
//!
//! Every binary file starts with a line-oriented text header of `key value`
//! pairs closed by an `end` line, followed by little-endian `f64` data. The
//! header carries a CRC-32 of the data bytes.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use emovox_core::corpus::{Corpus, CorpusConfig, EmotionLabel, SideTable, Utterance, EMOTION_NAMES};
use emovox_core::Tensor;

use crate::config::CorpusSection;
use crate::error::{CliError, IoContext, Result};

pub const MEL_MAGIC: &str = "emovox-mel 1";
pub const UTTERANCE_MAGIC: &str = "emovox-utterance 1";
pub const MANIFEST_MAGIC: &str = "emovox-manifest 1";

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const SIDE_TABLE_FILE: &str = "side_table.csv";
pub const CORPUS_CONFIG_FILE: &str = "corpus.toml";
pub const UTTERANCE_DIR: &str = "utterances";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
}

impl Split {
    fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
        }
    }
}

pub fn f64_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn f64s_from(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect()
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(" ")
}

/// Parsed `key value` header plus the byte offset of the payload.
struct Header<'a> {
    path: &'a Path,
    fields: Vec<(String, String)>,
    payload_at: usize,
}

impl<'a> Header<'a> {
    fn parse(bytes: &[u8], magic: &str, path: &'a Path) -> Result<Self> {
        let mut fields = Vec::new();
        let mut pos = 0;
        let mut first = true;
        loop {
            let Some(len) = bytes[pos..].iter().position(|&b| b == b'\n') else {
                return Err(CliError::data(path, "header is not terminated"));
            };
            let line = std::str::from_utf8(&bytes[pos..pos + len])
                .map_err(|_| CliError::data(path, "header is not valid UTF-8"))?;
            pos += len + 1;
            if first {
                if line != magic {
                    return Err(CliError::data(path, format!("expected `{magic}`, found `{line}`")));
                }
                first = false;
                continue;
            }
            if line == "end" {
                break;
            }
            let (k, v) = line.split_once(' ').unwrap_or((line, ""));
            fields.push((k.to_string(), v.to_string()));
        }
        Ok(Header {
            path,
            fields,
            payload_at: pos,
        })
    }

    fn get(&self, key: &str) -> Result<&str> {
        self.fields
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| CliError::data(self.path, format!("header field `{key}` missing")))
    }

    fn number<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key)?;
        v.parse()
            .map_err(|_| CliError::data(self.path, format!("header field `{key}` is not a number: `{v}`")))
    }

    fn numbers(&self, key: &str) -> Result<Vec<usize>> {
        self.get(key)?
            .split_whitespace()
            .map(|t| {
                t.parse()
                    .map_err(|_| CliError::data(self.path, format!("bad entry `{t}` in `{key}`")))
            })
            .collect()
    }
}

fn mel_fields(out: &mut String, mel: &Tensor, blob: &[u8]) {
    let _ = writeln!(out, "frames {}", mel.rows());
    let _ = writeln!(out, "bins {}", mel.cols());
    let _ = writeln!(out, "crc32 {:08x}", crc32fast::hash(blob));
    out.push_str("end\n");
}

fn read_mel_payload(header: &Header<'_>, bytes: &[u8]) -> Result<Tensor> {
    let path = header.path;
    let frames: usize = header.number("frames")?;
    let bins: usize = header.number("bins")?;
    let crc = u32::from_str_radix(header.get("crc32")?, 16)
        .map_err(|_| CliError::data(path, "header field `crc32` is not hexadecimal"))?;
    let blob = &bytes[header.payload_at..];
    let expected = frames * bins * 8;
    if blob.len() != expected {
        return Err(CliError::data(
            path,
            format!("mel payload is {} bytes, header promises {expected}", blob.len()),
        ));
    }
    if crc32fast::hash(blob) != crc {
        return Err(CliError::data(path, "mel payload checksum mismatch"));
    }
    Tensor::new(vec![frames, bins], f64s_from(blob)).map_err(|e| CliError::data(path, e.to_string()))
}

pub fn encode_mel(mel: &Tensor) -> Vec<u8> {
    let blob = f64_bytes(mel.data());
    let mut head = format!("{MEL_MAGIC}\n");
    mel_fields(&mut head, mel, &blob);
    let mut out = head.into_bytes();
    out.extend_from_slice(&blob);
    out
}

pub fn decode_mel(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let header = Header::parse(bytes, MEL_MAGIC, path)?;
    read_mel_payload(&header, bytes)
}

pub fn write_mel(path: &Path, mel: &Tensor) -> Result<()> {
    fs::write(path, encode_mel(mel)).at(path)
}

pub fn read_mel(path: &Path) -> Result<Tensor> {
    decode_mel(&fs::read(path).at(path)?, path)
}

pub fn encode_utterance(utt: &Utterance, split: Split) -> Vec<u8> {
    let blob = f64_bytes(utt.mel.data());
    let mut head = format!("{UTTERANCE_MAGIC}\n");
    let _ = writeln!(head, "id {}", utt.utt_id);
    let _ = writeln!(head, "speaker {}", utt.speaker_id);
    let emotion = utt.emotion.id().map_or("-", |e| EMOTION_NAMES[e]);
    let _ = writeln!(head, "emotion {emotion}");
    let _ = writeln!(head, "split {}", split.name());
    let _ = writeln!(head, "phonemes {}", join(&utt.phoneme_ids));
    let _ = writeln!(head, "durations {}", join(&utt.durations));
    mel_fields(&mut head, &utt.mel, &blob);
    let mut out = head.into_bytes();
    out.extend_from_slice(&blob);
    out
}

pub fn decode_utterance(bytes: &[u8], path: &Path) -> Result<(Utterance, Split)> {
    let header = Header::parse(bytes, UTTERANCE_MAGIC, path)?;
    let emotion = match header.get("emotion")? {
        "-" => EmotionLabel::Absent,
        name => EmotionLabel::Present(
            emovox_core::corpus::emotion_id(name)
                .ok_or_else(|| CliError::data(path, format!("unknown emotion `{name}`")))?,
        ),
    };
    let split = match header.get("split")? {
        "train" => Split::Train,
        "validation" => Split::Validation,
        other => return Err(CliError::data(path, format!("unknown split `{other}`"))),
    };
    let utt = Utterance {
        utt_id: header.get("id")?.to_string(),
        speaker_id: header.number("speaker")?,
        phoneme_ids: header.numbers("phonemes")?,
        durations: header.numbers("durations")?,
        mel: read_mel_payload(&header, bytes)?,
        emotion,
    };
    utt.validate().map_err(|e| CliError::data(path, e.to_string()))?;
    Ok((utt, split))
}

/// A corpus read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusDir {
    pub corpus: Corpus,
    /// `None` when the directory has no side table.
    pub side_table: Option<SideTable>,
    pub config: CorpusConfig,
}

/// Manifest entries: file name and byte length.
pub fn write_corpus(dir: &Path, corpus: &Corpus, side: &SideTable, cfg: &CorpusConfig) -> Result<Vec<(String, u64)>> {
    let utt_dir = dir.join(UTTERANCE_DIR);
    fs::create_dir_all(&utt_dir).at(&utt_dir)?;
    let mut entries = Vec::with_capacity(corpus.len());
    let tagged = corpus
        .train
        .iter()
        .map(|u| (u, Split::Train))
        .chain(corpus.validation.iter().map(|u| (u, Split::Validation)));
    for (utt, split) in tagged {
        let name = format!("{}.utt", utt.utt_id);
        let bytes = encode_utterance(utt, split);
        let path = utt_dir.join(&name);
        fs::write(&path, &bytes).at(&path)?;
        entries.push((name, bytes.len() as u64));
    }

    let mut manifest = format!("{MANIFEST_MAGIC}\ncount {}\n", entries.len());
    for (name, len) in &entries {
        let _ = writeln!(manifest, "{name} {len}");
    }
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, manifest).at(&path)?;

    let mut table = String::from("utt_id,true_emotion\n");
    for (id, e) in side.entries() {
        let _ = writeln!(table, "{id},{}", EMOTION_NAMES[*e]);
    }
    let path = dir.join(SIDE_TABLE_FILE);
    fs::write(&path, table).at(&path)?;

    let section = CorpusSection::from(cfg.clone());
    let text = toml::to_string_pretty(&section).map_err(|e| CliError::Config(e.to_string()))?;
    let path = dir.join(CORPUS_CONFIG_FILE);
    fs::write(&path, text).at(&path)?;
    Ok(entries)
}

fn read_manifest(dir: &Path) -> Result<Vec<(PathBuf, u64)>> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).at(&path)?;
    let mut lines = text.lines();
    if lines.next() != Some(MANIFEST_MAGIC) {
        return Err(CliError::data(&path, "not an emovox manifest"));
    }
    let count: usize = lines
        .next()
        .and_then(|l| l.strip_prefix("count "))
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| CliError::data(&path, "missing `count` line"))?;
    let mut entries = Vec::with_capacity(count);
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let (name, len) = line
            .rsplit_once(' ')
            .and_then(|(n, l)| Some((n, l.parse::<u64>().ok()?)))
            .ok_or_else(|| CliError::data(&path, format!("bad manifest line `{line}`")))?;
        entries.push((dir.join(UTTERANCE_DIR).join(name), len));
    }
    if entries.len() != count {
        return Err(CliError::data(
            &path,
            format!("manifest declares {count} utterances but lists {}", entries.len()),
        ));
    }
    Ok(entries)
}

fn read_side_table(dir: &Path) -> Result<Option<SideTable>> {
    let path = dir.join(SIDE_TABLE_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).at(&path)?;
    let mut entries = Vec::new();
    for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
        let (id, name) = line
            .split_once(',')
            .ok_or_else(|| CliError::data(&path, format!("bad side-table line `{line}`")))?;
        let e = emovox_core::corpus::emotion_id(name.trim())
            .ok_or_else(|| CliError::data(&path, format!("unknown emotion `{name}`")))?;
        entries.push((id.to_string(), e));
    }
    Ok(Some(SideTable::new(entries)))
}

pub fn read_corpus_config(dir: &Path) -> Result<CorpusConfig> {
    let path = dir.join(CORPUS_CONFIG_FILE);
    let text = fs::read_to_string(&path).at(&path)?;
    let section: CorpusSection =
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {}", path.display(), e.message())))?;
    Ok(section.into())
}

pub fn read_corpus(dir: &Path) -> Result<CorpusDir> {
    let mut corpus = Corpus::default();
    for (path, len) in read_manifest(dir)? {
        let bytes = fs::read(&path).at(&path)?;
        if bytes.len() as u64 != len {
            return Err(CliError::data(
                &path,
                format!("file is {} bytes, manifest says {len}", bytes.len()),
            ));
        }
        match decode_utterance(&bytes, &path)? {
            (utt, Split::Train) => corpus.train.push(utt),
            (utt, Split::Validation) => corpus.validation.push(utt),
        }
    }
    Ok(CorpusDir {
        corpus,
        side_table: read_side_table(dir)?,
        config: read_corpus_config(dir)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_fields() {
        let bytes = b"magic 1\nid a b\nn 4\nlist 1 2 3\nend\nPAYLOAD";
        let h = Header::parse(bytes, "magic 1", Path::new("f")).unwrap();
        assert_eq!(h.get("id").unwrap(), "a b");
        assert_eq!(h.number::<usize>("n").unwrap(), 4);
        assert_eq!(h.numbers("list").unwrap(), [1, 2, 3]);
        assert_eq!(&bytes[h.payload_at..], b"PAYLOAD");
        assert!(h.get("missing").is_err());
        assert!(h.number::<usize>("id").is_err());
    }

    #[test]
    fn header_errors() {
        let p = Path::new("f");
        assert!(Header::parse(b"other 1\nend\n", "magic 1", p).is_err());
        assert!(Header::parse(b"magic 1\nn 4\n", "magic 1", p).is_err());
        assert!(Header::parse(b"magic 1\n\xff\nend\n", "magic 1", p).is_err());
    }

    #[test]
    fn f64_bytes_round_trip() {
        let xs = [0.0, -0.0, 1.5, f64::MIN_POSITIVE, f64::INFINITY];
        let back = f64s_from(&f64_bytes(&xs));
        assert!(xs.iter().zip(&back).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
