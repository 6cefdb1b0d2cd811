//! On-disk sessions: one directory per session holding PNGs and a JSON
//! manifest.
//!
//! ```text
//! <root>/<id>/manifest.json
//! <root>/<id>/input.png
//! <root>/<id>/seg_initial.png
//! <root>/<id>/seg_current-<rev>.png
//! <root>/<id>/steps/<step id>/{output,seg_used,seg_out}.png
//! <root>/<id>/assets/<background id>.png
//! ```
//!
//! Step and asset files never change once written. Saving writes the new
//! files first and then replaces the manifest atomically, so a crash leaves
//! the previous manifest intact; files it no longer references are removed
//! afterwards.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use segedit_core::image::SegMap;
use segedit_core::instruction::ParsedInstruction;
use segedit_core::io::{decode_png, decode_segmap_png, encode_png, encode_segmap_png, palette_from_json, palette_to_json};
use segedit_core::{Error, Result};
use segedit_editnet::checkpoint::write_atomic;
use serde::{Deserialize, Serialize};

use crate::session::{EditSession, EditStep, SessionState};

pub const MANIFEST_FILE: &str = "manifest.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StepRecord {
    id: String,
    instruction: ParsedInstruction,
    background_ref: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    id: String,
    instruction: String,
    target_label: String,
    state: SessionState,
    error: Option<String>,
    palette: serde_json::Value,
    seg_current: String,
    cursor: usize,
    steps: Vec<StepRecord>,
    backgrounds: Vec<String>,
    created_at: DateTime<Utc>,
    updated_at: DateTime<Utc>,
}

/// Session directories under one root.
#[derive(Debug, Clone)]
pub struct SessionStore {
    root: PathBuf,
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

fn write_if_missing(path: &Path, bytes: impl FnOnce() -> Result<Vec<u8>>) -> Result<()> {
    if !path.exists() {
        write_atomic(path, &bytes()?)?;
    }
    Ok(())
}

impl SessionStore {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn dir(&self, id: &str) -> Result<PathBuf> {
        if !valid_id(id) {
            return Err(Error::Parameter(format!("invalid session id `{id}`")));
        }
        Ok(self.root.join(id))
    }

    /// Ids of every stored session, sorted.
    pub fn list(&self) -> Result<Vec<String>> {
        let mut ids = Vec::new();
        for entry in fs::read_dir(&self.root)? {
            let entry = entry?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if valid_id(&name) && entry.path().join(MANIFEST_FILE).is_file() {
                ids.push(name);
            }
        }
        ids.sort();
        Ok(ids)
    }

    pub fn save(&self, session: &EditSession) -> Result<()> {
        let dir = self.dir(&session.id)?;
        fs::create_dir_all(&dir)?;
        let palette = session.palette();
        let check = |seg: &SegMap| {
            if seg.palette() != palette {
                return Err(Error::Palette(format!("session {} mixes palettes", session.id)));
            }
            Ok(())
        };
        check(&session.seg_current)?;
        for step in &session.steps {
            check(&step.seg_used)?;
            check(&step.seg_out)?;
        }

        write_if_missing(&dir.join("input.png"), || encode_png(&session.input))?;
        write_if_missing(&dir.join("seg_initial.png"), || encode_segmap_png(&session.seg_initial))?;
        let seg_current = format!("seg_current-{}.png", uuid::Uuid::new_v4().simple());
        write_atomic(&dir.join(&seg_current), &encode_segmap_png(&session.seg_current)?)?;
        for step in &session.steps {
            if !valid_id(&step.id) {
                return Err(Error::Parameter(format!("invalid step id `{}`", step.id)));
            }
            let sd = dir.join("steps").join(&step.id);
            write_if_missing(&sd.join("output.png"), || encode_png(&step.output))?;
            write_if_missing(&sd.join("seg_used.png"), || encode_segmap_png(&step.seg_used))?;
            write_if_missing(&sd.join("seg_out.png"), || encode_segmap_png(&step.seg_out))?;
        }
        for (id, image) in &session.backgrounds {
            if !valid_id(id) {
                return Err(Error::Parameter(format!("invalid background id `{id}`")));
            }
            write_if_missing(&dir.join("assets").join(format!("{id}.png")), || encode_png(image))?;
        }

        let manifest = Manifest {
            version: FORMAT_VERSION,
            id: session.id.clone(),
            instruction: session.instruction.clone(),
            target_label: session.target_label.clone(),
            state: session.state,
            error: session.error.clone(),
            palette: palette_to_json(palette),
            seg_current: seg_current.clone(),
            cursor: session.cursor,
            steps: session
                .steps
                .iter()
                .map(|s| StepRecord {
                    id: s.id.clone(),
                    instruction: s.instruction.clone(),
                    background_ref: s.background_ref.clone(),
                })
                .collect(),
            backgrounds: session.backgrounds.keys().cloned().collect(),
            created_at: session.created_at,
            updated_at: session.updated_at,
        };
        write_atomic(&dir.join(MANIFEST_FILE), &serde_json::to_vec_pretty(&manifest)?)?;
        self.collect_garbage(&dir, &manifest)
    }

    /// Removes files the manifest no longer references.
    fn collect_garbage(&self, dir: &Path, manifest: &Manifest) -> Result<()> {
        for entry in fs::read_dir(dir)? {
            let name = entry?.file_name().to_string_lossy().into_owned();
            if name.starts_with("seg_current-") && name != manifest.seg_current {
                fs::remove_file(dir.join(&name))?;
            }
        }
        let live: BTreeSet<&str> = manifest.steps.iter().map(|s| s.id.as_str()).collect();
        let steps = dir.join("steps");
        if steps.is_dir() {
            for entry in fs::read_dir(&steps)? {
                let name = entry?.file_name().to_string_lossy().into_owned();
                if !live.contains(name.as_str()) {
                    fs::remove_dir_all(steps.join(&name))?;
                }
            }
        }
        Ok(())
    }

    /// Loads a session; `None` if no manifest exists for `id`.
    pub fn load(&self, id: &str) -> Result<Option<EditSession>> {
        let dir = self.dir(id)?;
        let manifest_path = dir.join(MANIFEST_FILE);
        if !manifest_path.is_file() {
            return Ok(None);
        }
        let manifest: Manifest = serde_json::from_slice(&fs::read(&manifest_path)?)?;
        if manifest.version != FORMAT_VERSION || manifest.id != id {
            return Err(Error::Parameter(format!("manifest for `{id}` has version {} and id `{}`", manifest.version, manifest.id)));
        }
        let palette = palette_from_json(&manifest.palette)?;
        let seg = |path: PathBuf| -> Result<SegMap> { decode_segmap_png(&fs::read(path)?, palette.clone()) };
        let image = |path: PathBuf| decode_png(&fs::read(path)?);

        let mut steps = Vec::with_capacity(manifest.steps.len());
        for rec in manifest.steps {
            let sd = dir.join("steps").join(&rec.id);
            steps.push(EditStep {
                output: image(sd.join("output.png"))?,
                seg_used: seg(sd.join("seg_used.png"))?,
                seg_out: seg(sd.join("seg_out.png"))?,
                id: rec.id,
                instruction: rec.instruction,
                background_ref: rec.background_ref,
            });
        }
        let mut backgrounds = BTreeMap::new();
        for bid in manifest.backgrounds {
            let img = image(dir.join("assets").join(format!("{bid}.png")))?;
            backgrounds.insert(bid, img);
        }
        let session = EditSession {
            id: manifest.id,
            input: image(dir.join("input.png"))?,
            instruction: manifest.instruction,
            seg_initial: seg(dir.join("seg_initial.png"))?,
            seg_current: seg(dir.join(&manifest.seg_current))?,
            target_label: manifest.target_label,
            state: manifest.state,
            error: manifest.error,
            steps,
            cursor: manifest.cursor,
            backgrounds,
            created_at: manifest.created_at,
            updated_at: manifest.updated_at,
        };
        session.check_invariants()?;
        Ok(Some(session))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::session::tests::engine;
    use crate::session::BackgroundInput;
    use segedit_core::image::ImageBuffer;
    use segedit_core::synth::make_synthetic_dataset;

    #[test]
    fn round_trip_preserves_the_session() {
        let eng = engine();
        let s = make_synthetic_dataset(1, 12, 64).remove(0);
        let shape = s.target().shape.label();
        let mut session = EditSession::create(&eng, &s.image, &format!("the {shape} is red")).unwrap();
        session.apply(&eng, &format!("the {shape} is green"), None).unwrap();
        let bg = BackgroundInput {
            id: "bg1".into(),
            image: ImageBuffer::from_fn(64, 64, |y, x| [((y + 2 * x) % 7) as f64 / 7.0, 0.3, 0.6]),
        };
        session.apply(&eng, &format!("put the {shape} on the new background"), Some(bg)).unwrap();
        session.undo();

        let tmp = tempfile::tempdir().unwrap();
        let store = SessionStore::new(tmp.path()).unwrap();
        store.save(&session).unwrap();
        assert_eq!(store.load(&session.id).unwrap().unwrap(), session);
        assert_eq!(store.list().unwrap(), vec![session.id.clone()]);
        assert!(store.load("missing").unwrap().is_none());
        assert!(store.load("../etc").is_err());

        // A new branch drops the discarded step's directory.
        let dropped = session.steps[1].id.clone();
        session.apply(&eng, &format!("2x small {shape}"), None).unwrap();
        store.save(&session).unwrap();
        assert!(!tmp.path().join(&session.id).join("steps").join(dropped).exists());
        let currents = fs::read_dir(tmp.path().join(&session.id))
            .unwrap()
            .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with("seg_current-"))
            .count();
        assert_eq!(currents, 1);
        assert_eq!(store.load(&session.id).unwrap().unwrap(), session);
    }
}
