//! In-memory dataset types and the versioned JSON dataset file.
//!
//! ```json
//! {"version": 1, "feature_dim": 16, "vocab": ["<pad>", ...],
//!  "videos": [{"id": "v0000", "num_frames": 64, "features": [[...], ...],
//!              "events": [{"start": 0.125, "end": 0.3125, "caption": ["person", ...]}]}]}
//! ```

use std::collections::HashMap;
use std::path::Path;

use ndiff::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::temporal::TimeSpan;

pub const DATASET_VERSION: u32 = 1;

pub type TokenId = usize;

/// Token table with five reserved ids at the front.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    pub const PAD: TokenId = 0;
    /// `<s>`, opens each caption.
    pub const BOS: TokenId = 1;
    pub const EOS: TokenId = 2;
    /// `<sep>`, opens each event.
    pub const SEP: TokenId = 3;
    /// Placeholder replaced by the anchor's time embedding.
    pub const SLOT: TokenId = 4;
    pub const RESERVED: [&'static str; 5] = ["<pad>", "<s>", "</s>", "<sep>", "<slot>"];

    pub fn new<S: AsRef<str>>(words: impl IntoIterator<Item = S>) -> Self {
        let mut tokens: Vec<String> = Self::RESERVED.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, TokenId> =
            tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        for w in words {
            let w = w.as_ref();
            if !index.contains_key(w) {
                index.insert(w.to_string(), tokens.len());
                tokens.push(w.to_string());
            }
        }
        Self { tokens, index }
    }

    /// Rebuilds from a full token list whose first five entries must be the
    /// reserved tokens.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, r) in Self::RESERVED.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*r) {
                return Err(Error::Config(format!("vocab slot {i} must be `{r}`")));
            }
        }
        let vocab = Self::new(tokens.iter().skip(Self::RESERVED.len()));
        if vocab.len() != tokens.len() {
            return Err(Error::Config("vocab contains duplicate tokens".into()));
        }
        Ok(vocab)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn is_reserved(id: TokenId) -> bool {
        id < Self::RESERVED.len()
    }

    pub fn id(&self, token: &str) -> Result<TokenId> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| Error::UnknownToken(token.to_string()))
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, words: &[impl AsRef<str>]) -> Result<Vec<TokenId>> {
        words.iter().map(|w| self.id(w.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Vec<String> {
        ids.iter().map(|&i| self.tokens[i].clone()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Event {
    pub span: TimeSpan,
    pub caption: Vec<TokenId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoSample {
    pub id: String,
    /// `[num_frames × feature_dim]`
    pub features: Tensor,
    /// Sorted by start time.
    pub events: Vec<Event>,
}

impl VideoSample {
    pub fn num_frames(&self) -> usize {
        self.features.rows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub feature_dim: usize,
    pub vocab: Vocab,
    pub videos: Vec<VideoSample>,
}

#[derive(Serialize, Deserialize)]
struct EventFile {
    start: f64,
    end: f64,
    caption: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct VideoFile {
    id: String,
    num_frames: usize,
    features: Vec<Vec<f64>>,
    events: Vec<EventFile>,
}

#[derive(Serialize, Deserialize)]
struct DatasetFile {
    version: u32,
    feature_dim: usize,
    vocab: Vec<String>,
    videos: Vec<VideoFile>,
}

/// Reads only the `version` field so mismatches are reported before the rest
/// of the document is interpreted.
#[derive(Deserialize)]
pub(crate) struct VersionProbe {
    pub version: u32,
}

pub(crate) fn check_version(text: &str, kind: &'static str, expected: u32) -> Result<()> {
    let probe: VersionProbe = serde_json::from_str(text)?;
    if probe.version != expected {
        return Err(Error::SchemaVersion {
            kind,
            found: probe.version,
            expected,
        });
    }
    Ok(())
}

impl Dataset {
    pub fn to_json(&self) -> Result<String> {
        let file = DatasetFile {
            version: DATASET_VERSION,
            feature_dim: self.feature_dim,
            vocab: self.vocab.tokens().to_vec(),
            videos: self
                .videos
                .iter()
                .map(|v| VideoFile {
                    id: v.id.clone(),
                    num_frames: v.num_frames(),
                    features: (0..v.num_frames()).map(|r| v.features.row(r).to_vec()).collect(),
                    events: v
                        .events
                        .iter()
                        .map(|e| EventFile {
                            start: e.span.start(),
                            end: e.span.end(),
                            caption: self.vocab.decode(&e.caption),
                        })
                        .collect(),
                })
                .collect(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        check_version(text, "dataset", DATASET_VERSION)?;
        let file: DatasetFile = serde_json::from_str(text)?;
        let vocab = Vocab::from_tokens(file.vocab)?;
        let mut videos = Vec::with_capacity(file.videos.len());
        for v in file.videos {
            if v.features.len() != v.num_frames {
                return Err(Error::LengthMismatch {
                    what: "features rows vs num_frames",
                    left: v.features.len(),
                    right: v.num_frames,
                });
            }
            if let Some(row) = v.features.iter().find(|r| r.len() != file.feature_dim) {
                return Err(Error::FeatureDim {
                    expected: file.feature_dim,
                    got: row.len(),
                });
            }
            let features = Tensor::from_rows(&v.features)?;
            let mut events = Vec::with_capacity(v.events.len());
            for e in v.events {
                let caption = vocab.encode(&e.caption)?;
                if let Some(&r) = caption.iter().find(|&&t| Vocab::is_reserved(t)) {
                    return Err(Error::ReservedToken(r));
                }
                events.push(Event {
                    span: TimeSpan::new(e.start, e.end)?,
                    caption,
                });
            }
            events.sort_by(|a, b| a.span.start().total_cmp(&b.span.start()));
            videos.push(VideoSample {
                id: v.id,
                features,
                events,
            });
        }
        Ok(Self {
            feature_dim: file.feature_dim,
            vocab,
            videos,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn max_events(&self) -> usize {
        self.videos.iter().map(|v| v.events.len()).max().unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_come_first() {
        let v = Vocab::new(["a", "b", "a"]);
        assert_eq!(v.len(), 7);
        assert_eq!(v.id("<sep>").unwrap(), Vocab::SEP);
        assert_eq!(v.id("<slot>").unwrap(), Vocab::SLOT);
        assert_eq!(v.id("a").unwrap(), 5);
        assert!(Vocab::from_tokens(vec!["x".into()]).is_err());
        assert_eq!(Vocab::from_tokens(v.tokens().to_vec()).unwrap(), v);
    }

    #[test]
    fn version_mismatch_is_reported() {
        let text = r#"{"version": 99, "feature_dim": 1, "vocab": [], "videos": []}"#;
        assert!(matches!(
            Dataset::from_json(text),
            Err(Error::SchemaVersion { found: 99, .. })
        ));
    }

    #[test]
    fn json_roundtrip() {
        let vocab = Vocab::new(["open", "door"]);
        let ds = Dataset {
            feature_dim: 2,
            videos: vec![VideoSample {
                id: "v0".into(),
                features: Tensor::from_vec(vec![0.5, -1.0, 0.25, 2.0], 2, 2),
                events: vec![Event {
                    span: TimeSpan::new(0.0, 0.5).unwrap(),
                    caption: vocab.encode(&["open", "door"]).unwrap(),
                }],
            }],
            vocab,
        };
        let back = Dataset::from_json(&ds.to_json().unwrap()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn reserved_tokens_in_captions_rejected() {
        let text = r#"{"version": 1, "feature_dim": 1,
            "vocab": ["<pad>", "<s>", "</s>", "<sep>", "<slot>", "x"],
            "videos": [{"id": "a", "num_frames": 1, "features": [[0.0]],
                        "events": [{"start": 0.0, "end": 1.0, "caption": ["x", "<sep>"]}]}]}"#;
        assert!(matches!(Dataset::from_json(text), Err(Error::ReservedToken(3))));
    }
}
