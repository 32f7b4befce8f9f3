//! JSONL corpus files: one instance per line.
//!
//! ```text
//! {"id": "...", "video": [[f32; D]; F] | {"gen_seed": u64},
//!  "asr": [{"t", "start", "end", "text"}], "events": [{"start", "end"}],
//!  "caption": "...", "absent": {"asr": bool, "events": bool}}
//! ```
//!
//! Absence is explicit; an absent modality is written as an empty list.

use std::path::Path;

use mrvpc_core::data::{gen_instance, AsrSentence, Event, Instance, WorldSpec};
use mrvpc_core::nn::Tensor;
use serde::{Deserialize, Serialize};

use crate::{fsutil, HarnessError, Result};

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum VideoRecord {
    Frames(Vec<Vec<f32>>),
    Generated { gen_seed: u64 },
}

#[derive(Serialize, Deserialize)]
struct AsrRecord {
    t: f32,
    start: f32,
    end: f32,
    text: String,
}

#[derive(Serialize, Deserialize)]
struct EventRecord {
    start: f32,
    end: f32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<(usize, usize)>,
}

#[derive(Serialize, Deserialize, Default)]
struct Absent {
    asr: bool,
    events: bool,
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    video: VideoRecord,
    #[serde(default)]
    asr: Vec<AsrRecord>,
    #[serde(default)]
    events: Vec<EventRecord>,
    caption: String,
    #[serde(default)]
    absent: Absent,
    /// Source instance of a distilled item.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source: Option<String>,
}

/// An instance as stored on disk, with optional distillation provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub instance: Instance,
    pub source: Option<String>,
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

fn to_record(e: &Entry) -> Record {
    let inst = &e.instance;
    let video = VideoRecord::Frames((0..inst.video.rows()).map(|r| inst.video.row(r).to_vec()).collect());
    let asr = inst
        .asr
        .iter()
        .flatten()
        .map(|s| AsrRecord {
            t: s.start,
            start: s.start,
            end: s.end,
            text: s.tokens.join(" "),
        })
        .collect();
    let events = inst
        .events
        .iter()
        .flatten()
        .map(|ev| EventRecord {
            start: ev.start,
            end: ev.end,
            label: ev.label,
        })
        .collect();
    Record {
        id: inst.id.clone(),
        video,
        asr,
        events,
        caption: inst.caption.join(" "),
        absent: Absent {
            asr: inst.asr.is_none(),
            events: inst.events.is_none(),
        },
        source: e.source.clone(),
    }
}

fn bad(line: usize, msg: impl std::fmt::Display) -> HarnessError {
    HarnessError::Data(format!("line {line}: {msg}"))
}

fn check_span(line: usize, start: f32, end: f32) -> Result<()> {
    if !(0.0..=1.0).contains(&start) || !(0.0..=1.0).contains(&end) || start > end {
        return Err(bad(line, format!("invalid span ({start}, {end})")));
    }
    Ok(())
}

fn from_record(r: Record, line: usize, world: Option<&WorldSpec>) -> Result<Entry> {
    let video = match r.video {
        VideoRecord::Frames(rows) => {
            let width = rows.first().map_or(0, Vec::len);
            if rows.is_empty() || width == 0 || rows.iter().any(|row| row.len() != width) {
                return Err(bad(line, "video must be a non-empty rectangular matrix"));
            }
            if rows.iter().flatten().any(|v| !v.is_finite()) {
                return Err(bad(line, "video contains non-finite values"));
            }
            let n = rows.len();
            Tensor::matrix(n, width, rows.concat())?
        }
        VideoRecord::Generated { gen_seed } => {
            let spec = world.ok_or_else(|| bad(line, "generated video needs a world spec"))?;
            gen_instance(spec, gen_seed)?.video
        }
    };
    if let Some(spec) = world {
        if video.shape() != [spec.frames, spec.feature_dim] {
            return Err(bad(line, format!("video shape {:?} does not match the world", video.shape())));
        }
    }
    if r.absent.asr && !r.asr.is_empty() {
        return Err(bad(line, "ASR marked absent but present"));
    }
    if r.absent.events && !r.events.is_empty() {
        return Err(bad(line, "events marked absent but present"));
    }
    let asr = if r.absent.asr {
        None
    } else {
        let mut out = Vec::with_capacity(r.asr.len());
        for a in r.asr {
            check_span(line, a.start, a.end)?;
            let tokens = words(&a.text);
            if tokens.is_empty() {
                return Err(bad(line, "empty ASR sentence"));
            }
            out.push(AsrSentence {
                tokens,
                start: a.start,
                end: a.end,
            });
        }
        Some(out)
    };
    let events = if r.absent.events {
        None
    } else {
        let mut out = Vec::with_capacity(r.events.len());
        for e in r.events {
            check_span(line, e.start, e.end)?;
            out.push(Event {
                start: e.start,
                end: e.end,
                label: e.label,
            });
        }
        Some(out)
    };
    Ok(Entry {
        instance: Instance {
            id: r.id,
            video,
            asr,
            events,
            caption: words(&r.caption),
        },
        source: r.source,
    })
}

pub fn to_jsonl(entries: &[Entry]) -> String {
    let mut out = String::new();
    for e in entries {
        out.push_str(&serde_json::to_string(&to_record(e)).expect("records serialize"));
        out.push('\n');
    }
    out
}

/// Parses a corpus. `world` resolves `gen_seed` videos and checks shapes.
pub fn from_jsonl(text: &str, world: Option<&WorldSpec>) -> Result<Vec<Entry>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(line).map_err(|e| bad(i + 1, e))?;
        out.push(from_record(rec, i + 1, world)?);
    }
    if out.is_empty() {
        return Err(HarnessError::Data("corpus file has no instances".into()));
    }
    Ok(out)
}

pub fn plain(instances: &[Instance]) -> Vec<Entry> {
    instances
        .iter()
        .map(|i| Entry {
            instance: i.clone(),
            source: None,
        })
        .collect()
}

pub fn save(path: &Path, entries: &[Entry]) -> Result<()> {
    fsutil::write_atomic(path, to_jsonl(entries).as_bytes())
}

pub fn load(path: &Path, world: Option<&WorldSpec>) -> Result<Vec<Entry>> {
    let text = fsutil::read_string(path)?;
    from_jsonl(&text, world).map_err(|e| HarnessError::Data(format!("{}: {e}", path.display())))
}

pub fn instances(entries: Vec<Entry>) -> Vec<Instance> {
    entries.into_iter().map(|e| e.instance).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use mrvpc_core::data::gen_corpus;
    use mrvpc_core::noise::{null_asr, null_events};

    #[test]
    fn round_trip_is_exact() {
        let spec = WorldSpec::default();
        let mut corpus = gen_corpus(&spec, 5, 3).unwrap();
        null_asr(&mut corpus[1]);
        null_events(&mut corpus[2]);
        let text = to_jsonl(&plain(&corpus));
        let back = instances(from_jsonl(&text, Some(&spec)).unwrap());
        assert_eq!(back, corpus);
        assert_eq!(to_jsonl(&plain(&back)), text);
        assert!(text.contains(r#""absent":{"asr":true,"events":false}"#));
    }

    #[test]
    fn generated_video_reference() {
        let spec = WorldSpec::default();
        let want = gen_instance(&spec, 77).unwrap();
        let line = r#"{"id":"a","video":{"gen_seed":77},"caption":"x","absent":{"asr":true,"events":true}}"#;
        let got = from_jsonl(line, Some(&spec)).unwrap();
        assert_eq!(got[0].instance.video, want.video);
        assert!(from_jsonl(line, None).is_err());
    }

    #[test]
    fn malformed_lines_are_data_errors() {
        for bad in [
            "not json",
            r#"{"id":"a","video":[[1.0],[1.0,2.0]],"caption":""}"#,
            r#"{"id":"a","video":[[1.0]],"caption":"","events":[{"start":0.5,"end":0.2}]}"#,
            r#"{"id":"a","video":[[1.0]],"caption":"","asr":[{"t":0,"start":0,"end":1,"text":"a"}],"absent":{"asr":true,"events":false}}"#,
            "",
        ] {
            assert!(matches!(from_jsonl(bad, None), Err(HarnessError::Data(_))), "{bad}");
        }
    }
}
