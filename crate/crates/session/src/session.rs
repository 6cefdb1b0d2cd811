//! Editing sessions: an input image, the current segmentation map and a
//! cursor-based stack of edit steps.
//!
//! Applying an instruction edits the visible result with `seg_current` as
//! the segmentation, truncates any redo tail and advances the cursor; the
//! step's output segmentation becomes the new `seg_current`. Undo and redo
//! move the cursor and restore the segmentation of the visible state.

use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use segedit_core::combiner::prepare_background;
use segedit_core::image::{ImageBuffer, SegMap};
use segedit_core::instruction::{parse_instruction, InstructionParser, ParsedInstruction};
use segedit_core::io::quantize;
use segedit_core::preproc::run_preprocessing;
use segedit_core::{Error, Result, Stage, StageExt};
use segedit_editnet::engine::EditEngine;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Ready,
    /// No target was found; the user has to paint one.
    NeedsSegmentation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditStep {
    /// Unique id; names the step's directory on disk.
    pub id: String,
    pub instruction: ParsedInstruction,
    pub seg_used: SegMap,
    pub seg_out: SegMap,
    pub output: ImageBuffer,
    pub background_ref: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditSession {
    pub id: String,
    pub input: ImageBuffer,
    pub instruction: String,
    /// Segmentation found at creation; visible again at cursor 0.
    pub seg_initial: SegMap,
    pub seg_current: SegMap,
    pub target_label: String,
    pub state: SessionState,
    /// Why the session needs a segmentation, if it does.
    pub error: Option<String>,
    pub steps: Vec<EditStep>,
    pub cursor: usize,
    /// Reference backgrounds by asset id.
    pub backgrounds: BTreeMap<String, ImageBuffer>,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
}

/// A background image supplied with an apply request.
#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundInput {
    pub id: String,
    pub image: ImageBuffer,
}

fn is_missing_target(e: &Error) -> bool {
    matches!(e.root(), Error::NoTarget(_) | Error::EmptyRegion(_))
}

/// The map shown when no target was found: all background, with the first
/// instruction noun added to the palette so the user can paint it.
fn blank_segmap(image: &ImageBuffer, palette: &BTreeMap<u32, String>, instruction: &ParsedInstruction) -> SegMap {
    let mut palette = palette.clone();
    if let Some(noun) = instruction.nouns.first() {
        if !palette.values().any(|l| l == noun) {
            let next = palette.keys().max().map_or(1, |k| k + 1);
            palette.insert(next, noun.clone());
        }
    }
    SegMap::background(image.height(), image.width(), palette)
}

impl EditSession {
    /// Runs preprocessing on the input. A missing target yields a session in
    /// the needs-segmentation state rather than an error.
    pub fn create(engine: &EditEngine, image: &ImageBuffer, instruction_text: &str) -> Result<EditSession> {
        let input = quantize(image);
        let instruction = parse_instruction(instruction_text).at(Stage::Parse)?;
        let now = Utc::now();
        let (seg, target, state, error) = match run_preprocessing(&input, &instruction, &engine.backends, &engine.table, engine.working_size()) {
            Ok(pre) => (pre.seg, pre.target, SessionState::Ready, None),
            Err(e) if is_missing_target(&e) => {
                let palette = match engine.backends.segment(&input) {
                    Ok(seg) => seg.palette().clone(),
                    Err(_) => BTreeMap::new(),
                };
                let seg = blank_segmap(&input, &palette, &instruction);
                let target = instruction.nouns.first().cloned().unwrap_or_default();
                (seg, target, SessionState::NeedsSegmentation, Some(e.to_string()))
            }
            Err(e) => return Err(e),
        };
        Ok(EditSession {
            id: uuid::Uuid::new_v4().simple().to_string(),
            input,
            instruction: instruction_text.to_string(),
            seg_initial: seg.clone(),
            seg_current: seg,
            target_label: target,
            state,
            error,
            steps: Vec::new(),
            cursor: 0,
            backgrounds: BTreeMap::new(),
            created_at: now,
            updated_at: now,
        })
    }

    pub fn palette(&self) -> &BTreeMap<u32, String> {
        self.seg_initial.palette()
    }

    /// `steps[cursor - 1].output`, or the input at cursor 0.
    pub fn visible_output(&self) -> &ImageBuffer {
        match self.cursor {
            0 => &self.input,
            k => &self.steps[k - 1].output,
        }
    }

    fn seg_at_cursor(&self) -> SegMap {
        match self.cursor {
            0 => self.seg_initial.clone(),
            k => self.steps[k - 1].seg_out.clone(),
        }
    }

    /// Replaces `seg_current` after checking its size and class ids against
    /// the session palette. No edit runs.
    pub fn update_segmap(&mut self, seg: &SegMap) -> Result<()> {
        if seg.dims() != self.input.dims() {
            return Err(Error::Shape(format!("seg {:?} vs image {:?}", seg.dims(), self.input.dims())));
        }
        let checked = SegMap::new(seg.height(), seg.width(), seg.data().to_vec(), self.palette().clone())?;
        self.state = if checked.data().iter().any(|id| *id != 0) {
            SessionState::Ready
        } else {
            self.state
        };
        self.seg_current = checked;
        self.updated_at = Utc::now();
        Ok(())
    }

    /// Edits the visible result and pushes the step. Returns its index.
    pub fn apply(&mut self, engine: &EditEngine, instruction_text: &str, background: Option<BackgroundInput>) -> Result<usize> {
        if self.seg_current.data().iter().all(|id| *id == 0) {
            return Err(Error::EmptyRegion("the segmentation map is empty; paint the target first".into()).at(Stage::Segmentation));
        }
        let instruction = InstructionParser::default()
            .parse_with_background(instruction_text, background.is_some())
            .at(Stage::Parse)?;
        let asset = match &background {
            Some(bg) => {
                if bg.image.dims() != self.input.dims() {
                    return Err(Error::Shape(format!("background {:?} vs image {:?}", bg.image.dims(), self.input.dims())).at(Stage::Background));
                }
                Some(prepare_background(&quantize(&bg.image), &engine.backends).at(Stage::Background)?)
            }
            None => None,
        };
        let outcome = engine.edit_parsed(self.visible_output(), instruction, Some(&self.seg_current), asset.as_ref())?;
        let background_ref = background.map(|bg| {
            self.backgrounds.insert(bg.id.clone(), quantize(&bg.image));
            bg.id
        });
        let step = EditStep {
            id: uuid::Uuid::new_v4().simple().to_string(),
            instruction: outcome.instruction,
            seg_used: self.seg_current.clone(),
            seg_out: outcome.seg_out,
            output: quantize(&outcome.output),
            background_ref,
        };
        self.steps.truncate(self.cursor);
        self.seg_current = step.seg_out.clone();
        self.steps.push(step);
        self.cursor = self.steps.len();
        self.target_label = outcome.preproc.target;
        self.state = SessionState::Ready;
        self.error = None;
        self.updated_at = Utc::now();
        Ok(self.cursor - 1)
    }

    /// Moves the cursor back one step; `false` (and no change) at cursor 0.
    pub fn undo(&mut self) -> bool {
        if self.cursor == 0 {
            return false;
        }
        self.cursor -= 1;
        self.seg_current = self.seg_at_cursor();
        self.updated_at = Utc::now();
        true
    }

    /// Moves the cursor forward one step; `false` (and no change) at the end.
    pub fn redo(&mut self) -> bool {
        if self.cursor == self.steps.len() {
            return false;
        }
        self.cursor += 1;
        self.seg_current = self.seg_at_cursor();
        self.updated_at = Utc::now();
        true
    }

    pub fn check_invariants(&self) -> Result<()> {
        if self.cursor > self.steps.len() {
            return Err(Error::Parameter(format!("cursor {} beyond {} steps", self.cursor, self.steps.len())));
        }
        if self.seg_current.dims() != self.input.dims() || self.steps.iter().any(|s| s.output.dims() != self.input.dims()) {
            return Err(Error::Shape("session images and maps must share the input size".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use segedit_core::backend::Backends;
    use segedit_core::synth::{make_synthetic_dataset, SynthSample};
    use segedit_editnet::model::{init_generator, ModelConfig};

    pub(crate) fn engine() -> EditEngine {
        let config = ModelConfig {
            working_size: 32,
            ..ModelConfig::default()
        };
        EditEngine::new(init_generator(&config, 1).unwrap(), Backends::toy())
    }

    fn sample(seed: u64) -> SynthSample {
        make_synthetic_dataset(1, seed, 64).remove(0)
    }

    #[test]
    fn create_matches_ground_truth_segmentation() {
        let eng = engine();
        let s = sample(3);
        let text = format!("the {} is red", s.target().shape.label());
        let a = EditSession::create(&eng, &s.image, &text).unwrap();
        assert_eq!(a.seg_current, s.seg);
        assert_eq!(a.state, SessionState::Ready);
        assert_eq!(a.target_label, s.target().shape.label());
        assert_eq!((a.steps.len(), a.cursor), (0, 0));
        let b = EditSession::create(&eng, &s.image, &text).unwrap();
        assert_ne!(a.id, b.id);
        assert_eq!(a.seg_current, b.seg_current);
    }

    #[test]
    fn missing_target_needs_segmentation() {
        let eng = engine();
        let blank = ImageBuffer::filled(64, 64, 3, 0.5);
        let mut session = EditSession::create(&eng, &blank, "the dog is red").unwrap();
        assert_eq!(session.state, SessionState::NeedsSegmentation);
        assert!(session.seg_current.data().iter().all(|id| *id == 0));
        assert!(session.error.is_some());
        let err = session.apply(&eng, "the dog is red", None).unwrap_err();
        assert!(matches!(err, Error::AtStage { stage: Stage::Segmentation, .. }));
        // Painting the new class makes the session editable.
        let id = session.seg_current.class_id_of("dog").unwrap();
        let mut seg = session.seg_current.clone();
        for y in 20..30 {
            for x in 20..30 {
                seg.set(y, x, id);
            }
        }
        session.update_segmap(&seg).unwrap();
        assert_eq!(session.state, SessionState::Ready);
        session.apply(&eng, "the dog is red", None).unwrap();
        assert_eq!(session.steps.len(), 1);
    }

    #[test]
    fn update_segmap_validates() {
        let eng = engine();
        let s = sample(5);
        let mut session = EditSession::create(&eng, &s.image, &format!("the {} is blue", s.target().shape.label())).unwrap();
        let before = session.clone();
        session.update_segmap(&before.seg_current).unwrap();
        assert_eq!(EditSession { updated_at: before.updated_at, ..session.clone() }, before);
        let small = SegMap::background(10, 10, before.palette().clone());
        assert!(matches!(session.update_segmap(&small), Err(Error::Shape(_))));
        let mut palette = before.palette().clone();
        palette.insert(9, "kite".into());
        let mut foreign = SegMap::background(64, 64, palette);
        foreign.set(0, 0, 9);
        assert!(matches!(session.update_segmap(&foreign), Err(Error::Palette(_))));
    }

    #[test]
    fn apply_undo_redo_and_branch_truncation() {
        let eng = engine();
        let s = sample(6);
        let shape = s.target().shape.label();
        let mut session = EditSession::create(&eng, &s.image, &format!("the {shape} is red")).unwrap();
        let input = session.input.clone();
        let k = session.apply(&eng, &format!("the {shape} is red"), None).unwrap();
        assert_eq!(k, 0);
        let out = session.visible_output().clone();
        assert!(session.undo());
        assert_eq!(session.visible_output(), &input);
        assert!(!session.undo());
        assert!(session.redo());
        assert_eq!(session.visible_output(), &out);
        assert!(!session.redo());
        session.undo();
        session.apply(&eng, &format!("2x small {shape}"), None).unwrap();
        assert_eq!(session.steps.len(), 1);
        assert_eq!(session.cursor, 1);
        session.check_invariants().unwrap();
    }

    #[test]
    fn doubling_quadruples_the_target_area() {
        let eng = engine();
        let s = make_synthetic_dataset(40, 8, 64)
            .into_iter()
            .find(|s| s.scene.objects.len() == 1 && s.target().size >= 18.0 && s.target().size <= 22.0)
            .expect("a single mid-size object");
        let shape = s.target().shape.label();
        let mut session = EditSession::create(&eng, &s.image, &format!("2x large {shape}")).unwrap();
        session.apply(&eng, &format!("2x large {shape}"), None).unwrap();
        let step = &session.steps[0];
        let class = s.target().shape.class_id();
        let ratio = step.seg_out.count_of(class) as f64 / step.seg_used.count_of(class) as f64;
        assert!((ratio - 4.0).abs() <= 0.4, "ratio {ratio}");
    }

    #[test]
    fn remove_gives_the_inpainted_base() {
        let eng = engine();
        let s = sample(9);
        let shape = s.target().shape.label();
        let mut session = EditSession::create(&eng, &s.image, &format!("remove the {shape}")).unwrap();
        session.apply(&eng, &format!("remove the {shape}"), None).unwrap();
        let class = s.target().shape.class_id();
        let step = &session.steps[0];
        assert_eq!(step.seg_out.count_of(class), 0);
        let hole = step.seg_used.mask_of(class);
        let irrelevant = segedit_core::image::split_by_mask(&session.input, &hole).unwrap().irrelevant;
        let base = eng.backends.inpaint(&irrelevant, &hole).unwrap();
        assert_eq!(step.output, quantize(&base));
    }
}
