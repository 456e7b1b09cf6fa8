use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SokeError};

use super::{Language, MotionSequence, PartLayout};

/// One line of a motion file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionRecord {
    pub text: String,
    pub lang: String,
    pub fps: f32,
    pub frames: Vec<Vec<f32>>,
}

impl MotionRecord {
    pub fn from_sequence(text: &str, seq: &MotionSequence) -> Self {
        Self {
            text: text.to_string(),
            lang: seq.language.to_string(),
            fps: seq.fps,
            frames: seq.frames().map(<[f32]>::to_vec).collect(),
        }
    }

    pub fn into_sequence(self, layout: PartLayout) -> Result<(String, MotionSequence)> {
        let lang: Language = self.lang.parse()?;
        let seq = MotionSequence::from_rows(&self.frames, self.fps, layout, lang)?;
        Ok((self.text, seq))
    }
}

pub fn write_motion_file(path: &Path, items: &[(String, MotionSequence)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (text, seq) in items {
        serde_json::to_writer(&mut w, &MotionRecord::from_sequence(text, seq))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_motion_file(path: &Path, layout: PartLayout) -> Result<Vec<(String, MotionSequence)>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: MotionRecord =
            serde_json::from_str(&line).map_err(|e| SokeError::Input(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(rec.into_sequence(layout)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn codec_round_trips_finite_values(
            rows in prop::collection::vec(prop::collection::vec(
                prop::num::f32::NORMAL | prop::num::f32::SUBNORMAL | prop::num::f32::ZERO, 133), 1..4),
            fps in 1.0f32..120.0,
        ) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("m.jsonl");
            let seq = MotionSequence::from_rows(&rows, fps, PartLayout::default(), Language::Dgs).unwrap();
            write_motion_file(&path, &[("hallo welt".into(), seq.clone())]).unwrap();
            let back = read_motion_file(&path, PartLayout::default()).unwrap();
            prop_assert_eq!(back.len(), 1);
            prop_assert_eq!(&back[0].0, "hallo welt");
            prop_assert_eq!(back[0].1.as_flat(), seq.as_flat());
            prop_assert_eq!(back[0].1.fps, fps);
        }
    }

    #[test]
    fn rejects_wrong_width() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        std::fs::write(&path, r#"{"text":"a","lang":"ASL","fps":25,"frames":[[1.0,2.0]]}"#).unwrap();
        assert!(matches!(
            read_motion_file(&path, PartLayout::default()),
            Err(SokeError::Layout(_))
        ));
    }
}
