//! Instruction template, task tokens, box coordinates and the toy tokenizer.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::SeededRng;
use crate::vision::{Scene, SceneObject};

pub const HUMAN: &str = "###Human:";
pub const ASSISTANT: &str = "###Assistant:";
pub const IMG_OPEN: &str = "<Img>";
pub const IMG_CLOSE: &str = "</Img>";
pub const IMAGE_HERE: &str = "<ImageHere>";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Vqa,
    Caption,
    Grounding,
    Refer,
    Identify,
    Detection,
}

impl Task {
    pub const ALL: [Task; 6] = [
        Task::Vqa,
        Task::Caption,
        Task::Grounding,
        Task::Refer,
        Task::Identify,
        Task::Detection,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Task::Vqa => "vqa",
            Task::Caption => "caption",
            Task::Grounding => "grounding",
            Task::Refer => "refer",
            Task::Identify => "identify",
            Task::Detection => "detection",
        }
    }

    pub fn token(self) -> &'static str {
        match self {
            Task::Vqa => "[vqa]",
            Task::Caption => "[caption]",
            Task::Grounding => "[grounding]",
            Task::Refer => "[refer]",
            Task::Identify => "[identify]",
            Task::Detection => "[detection]",
        }
    }

    /// Tasks that talk about object locations carry boxes.
    pub fn uses_boxes(self) -> bool {
        matches!(self, Task::Grounding | Task::Refer | Task::Identify | Task::Detection)
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim_start_matches('[').trim_end_matches(']');
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown task `{s}`")))
    }
}

/// Pixel boxes and the frame they live in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxSet {
    pub width: f64,
    pub height: f64,
    /// `(x1, y1, x2, y2)` in pixels.
    pub boxes: Vec<[f64; 4]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSample {
    pub task: Task,
    /// Procedural image key; `None` for text-only samples.
    pub image_seed: Option<u64>,
    pub instruction: String,
    pub target: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boxes: Option<BoxSet>,
}

/// With or without the task token.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateMode {
    Plain,
    MultiTask,
}

/// Scales a pixel box to integers in `[0, 100]`, rounding half away from zero.
pub fn normalize_box(b: [f64; 4], width: f64, height: f64) -> Result<[u32; 4]> {
    if !(width > 0.0 && height > 0.0 && width.is_finite() && height.is_finite()) {
        return Err(Error::invalid(format!("box frame must have positive extent, got {width}x{height}")));
    }
    let [x1, y1, x2, y2] = b;
    let ok = b.iter().all(|v| v.is_finite())
        && 0.0 <= x1
        && x1 <= x2
        && x2 <= width
        && 0.0 <= y1
        && y1 <= y2
        && y2 <= height;
    if !ok {
        return Err(Error::invalid(format!("box {b:?} outside {width}x{height} frame")));
    }
    let sx = |v: f64| (v * 100.0 / width).round() as u32;
    let sy = |v: f64| (v * 100.0 / height).round() as u32;
    Ok([sx(x1), sy(y1), sx(x2), sy(y2)])
}

/// `{<x1><y1><x2><y2>}` per box, concatenated.
pub fn format_boxes(set: &BoxSet) -> Result<String> {
    let mut out = String::new();
    for &b in &set.boxes {
        let [a, b, c, d] = normalize_box(b, set.width, set.height)?;
        out.push_str(&format!("{{<{a}><{b}><{c}><{d}>}}"));
    }
    Ok(out)
}

fn join_space(a: &str, b: &str) -> String {
    match (a.is_empty(), b.is_empty()) {
        (_, true) => a.to_string(),
        (true, false) => b.to_string(),
        (false, false) => format!("{a} {b}"),
    }
}

impl TaskSample {
    pub fn validate(&self) -> Result<()> {
        match (&self.boxes, self.task.uses_boxes()) {
            (None, true) => {
                return Err(Error::invalid(format!("{} sample has no boxes", self.task)));
            }
            (Some(_), false) => {
                return Err(Error::invalid(format!("{} sample must not carry boxes", self.task)));
            }
            (Some(set), true) => {
                if set.boxes.is_empty() {
                    return Err(Error::invalid(format!("{} sample has no boxes", self.task)));
                }
                format_boxes(set)?;
            }
            (None, false) => {}
        }
        Ok(())
    }

    /// Instruction text with box references spliced in where the task asks
    /// about a given region.
    pub fn instruction_text(&self) -> Result<String> {
        match (&self.boxes, self.task) {
            (Some(set), Task::Identify) => Ok(join_space(&self.instruction, &format_boxes(set)?)),
            _ => Ok(self.instruction.clone()),
        }
    }

    /// Answer text; boxes are appended for tasks that answer with locations.
    pub fn target_text(&self) -> Result<String> {
        match (&self.boxes, self.task) {
            (Some(set), t) if t != Task::Identify => Ok(join_space(&self.target, &format_boxes(set)?)),
            _ => Ok(self.target.clone()),
        }
    }
}

/// Prompt for `sample` up to and including the assistant marker.
pub fn render(sample: &TaskSample, mode: TemplateMode) -> Result<String> {
    sample.validate()?;
    let mut s = String::from(HUMAN);
    s.push(' ');
    if sample.image_seed.is_some() {
        s.push_str(IMG_OPEN);
        s.push_str(IMAGE_HERE);
        s.push_str(IMG_CLOSE);
        s.push(' ');
    }
    if mode == TemplateMode::MultiTask {
        s.push_str(sample.task.token());
        s.push(' ');
    }
    s.push_str(&sample.instruction_text()?);
    s.push_str(ASSISTANT);
    Ok(s)
}

/// Prompt followed by the answer, as used for training.
pub fn render_training(sample: &TaskSample, mode: TemplateMode) -> Result<String> {
    Ok(format!("{} {}", render(sample, mode)?, sample.target_text()?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParsedPrompt {
    pub has_image: bool,
    pub task: Option<Task>,
    pub instruction: String,
}

/// Inverse of [`render`]: strips the frame and returns its contents.
pub fn parse_prompt(text: &str) -> Result<ParsedPrompt> {
    let rest = text
        .strip_prefix(HUMAN)
        .and_then(|r| r.strip_prefix(' '))
        .ok_or_else(|| Error::invalid("prompt does not start with the human marker"))?;
    let rest = rest
        .strip_suffix(ASSISTANT)
        .ok_or_else(|| Error::invalid("prompt does not end with the assistant marker"))?;
    let frame = format!("{IMG_OPEN}{IMAGE_HERE}{IMG_CLOSE} ");
    let (has_image, rest) = match rest.strip_prefix(frame.as_str()) {
        Some(r) => (true, r),
        None => (false, rest),
    };
    let mut task = None;
    let mut rest = rest;
    for t in Task::ALL {
        if let Some(r) = rest.strip_prefix(t.token()).and_then(|r| r.strip_prefix(' ')) {
            task = Some(t);
            rest = r;
            break;
        }
    }
    Ok(ParsedPrompt {
        has_image,
        task,
        instruction: rest.to_string(),
    })
}

/// Byte-level vocabulary plus atomic special tokens.
#[derive(Clone, Debug)]
pub struct ToyVocab {
    specials: Vec<&'static str>,
}

impl Default for ToyVocab {
    fn default() -> Self {
        let mut specials = vec![HUMAN, ASSISTANT, IMG_OPEN, IMG_CLOSE, IMAGE_HERE];
        specials.extend(Task::ALL.iter().map(|t| t.token()));
        ToyVocab { specials }
    }
}

impl ToyVocab {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn size(&self) -> usize {
        256 + self.specials.len()
    }

    pub fn specials(&self) -> &[&'static str] {
        &self.specials
    }

    /// Id of a special token, if `s` is one.
    pub fn special_id(&self, s: &str) -> Option<u32> {
        self.specials.iter().position(|&t| t == s).map(|i| 256 + i as u32)
    }

    pub fn image_id(&self) -> u32 {
        self.special_id(IMAGE_HERE).expect("placeholder is a special")
    }

    pub fn is_task_id(&self, id: u32) -> bool {
        Task::ALL.iter().any(|t| self.special_id(t.token()) == Some(id))
    }

    /// Bytes to ids; at each position the longest matching special wins.
    pub fn encode(&self, bytes: &[u8]) -> Vec<u32> {
        let mut out = Vec::with_capacity(bytes.len());
        let mut i = 0;
        while i < bytes.len() {
            let hit = self
                .specials
                .iter()
                .enumerate()
                .filter(|(_, s)| bytes[i..].starts_with(s.as_bytes()))
                .max_by_key(|(_, s)| s.len());
            match hit {
                Some((k, s)) => {
                    out.push(256 + k as u32);
                    i += s.len();
                }
                None => {
                    out.push(bytes[i] as u32);
                    i += 1;
                }
            }
        }
        out
    }

    pub fn encode_str(&self, text: &str) -> Vec<u32> {
        self.encode(text.as_bytes())
    }

    pub fn decode(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(ids.len());
        for &id in ids {
            if id < 256 {
                out.push(id as u8);
            } else {
                let s = self
                    .specials
                    .get((id - 256) as usize)
                    .ok_or(Error::UnknownTokenId(id))?;
                out.extend_from_slice(s.as_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode_string(&self, ids: &[u32]) -> Result<String> {
        String::from_utf8(self.decode(ids)?).map_err(|e| Error::invalid(format!("decoded bytes are not UTF-8: {e}")))
    }
}

/// A rendered sample ready for the model.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSample {
    /// Prompt ids followed by answer ids.
    pub ids: Vec<u32>,
    /// First answer position in `ids`.
    pub target_start: usize,
    /// Position of the image placeholder, if the sample has an image.
    pub image_pos: Option<usize>,
    pub image_seed: Option<u64>,
}

pub fn encode_sample(vocab: &ToyVocab, sample: &TaskSample, mode: TemplateMode) -> Result<EncodedSample> {
    let mut ids = vocab.encode_str(&render(sample, mode)?);
    let target_start = ids.len();
    ids.extend(vocab.encode_str(&format!(" {}", sample.target_text()?)));
    let image_pos = ids.iter().position(|&i| i == vocab.image_id());
    Ok(EncodedSample {
        ids,
        target_start,
        image_pos,
        image_seed: sample.image_seed,
    })
}

pub fn stage_mode(stage: usize) -> TemplateMode {
    if stage >= 4 {
        TemplateMode::MultiTask
    } else {
        TemplateMode::Plain
    }
}

pub fn stage_resolution(stage: usize) -> usize {
    if stage >= 4 {
        448
    } else {
        224
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchOptions {
    pub resolution: usize,
    /// Draw image seeds from `0..pool` instead of fresh seeds.
    pub image_pool: Option<u64>,
}

impl BatchOptions {
    pub fn for_stage(stage: usize) -> Self {
        BatchOptions {
            resolution: stage_resolution(stage),
            image_pool: None,
        }
    }
}

/// Share of stage-4 samples that are text only.
pub const TEXT_ONLY_SHARE: f64 = 0.1;

const DESCRIBE_PROMPTS: [&str; 4] = [
    "Take a look at this image and describe what you notice.",
    "Describe this image.",
    "What do you see in this picture?",
    "Give a short description of the image.",
];

const TEXT_QA: [(&str, &str); 6] = [
    ("what color is the sky", "blue"),
    ("what color is grass", "green"),
    ("name a warm color", "orange"),
    ("how many sides does a box have", "four"),
    ("what is two plus two", "four"),
    ("spell the word box", "b o x"),
];

fn count_word(n: usize) -> &'static str {
    ["zero", "one", "two", "three", "four"].get(n).copied().unwrap_or("many")
}

fn object_box(o: &SceneObject, res: usize) -> BoxSet {
    BoxSet {
        width: res as f64,
        height: res as f64,
        boxes: vec![o.pixel_box(res)],
    }
}

fn sentence(scene: &Scene) -> String {
    let parts: Vec<String> = scene
        .objects
        .iter()
        .map(|o| format!("a {} box at the {}", o.color_name(), o.location()))
        .collect();
    format!("There is {}.", parts.join(" and "))
}

fn multitask_sample(task: Task, seed: u64, res: usize, rng: &mut SeededRng) -> TaskSample {
    let scene = Scene::generate(seed);
    let obj = &scene.objects[rng.below(scene.objects.len())];
    let all = BoxSet {
        width: res as f64,
        height: res as f64,
        boxes: scene.objects.iter().map(|o| o.pixel_box(res)).collect(),
    };
    let (instruction, target, boxes) = match task {
        Task::Vqa => {
            if rng.bernoulli(0.5) {
                ("how many boxes are there".to_string(), count_word(scene.objects.len()).to_string(), None)
            } else {
                (format!("what color is the box at the {}", obj.location()), obj.color_name().to_string(), None)
            }
        }
        Task::Caption => ("describe the image briefly".to_string(), scene.caption(), None),
        Task::Grounding => (
            "describe the image with object locations".to_string(),
            scene
                .objects
                .iter()
                .map(|o| format!("{} box", o.color_name()))
                .collect::<Vec<_>>()
                .join(", "),
            Some(all),
        ),
        Task::Refer => (format!("the {} box", obj.color_name()), String::new(), Some(object_box(obj, res))),
        Task::Identify => ("what is in".to_string(), format!("{} box", obj.color_name()), Some(object_box(obj, res))),
        Task::Detection => ("box".to_string(), String::new(), Some(all)),
    };
    TaskSample {
        task,
        image_seed: Some(seed),
        instruction,
        target,
        boxes,
    }
}

/// `n` synthetic samples for a curriculum stage (1 to 4). Stages 1 and 2
/// pair images with short captions, stage 3 uses conversational
/// instructions, stage 4 mixes all six tasks with some text-only samples.
pub fn build_stage_batch(stage: usize, seed: u64, n: usize) -> Result<Vec<TaskSample>> {
    build_stage_batch_with(stage, seed, n, BatchOptions::for_stage(stage))
}

pub fn build_stage_batch_with(stage: usize, seed: u64, n: usize, opts: BatchOptions) -> Result<Vec<TaskSample>> {
    if !(1..=4).contains(&stage) {
        return Err(Error::invalid(format!("stage must be 1 to 4, got {stage}")));
    }
    if n == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    let mut rng = SeededRng::derived(seed, &format!("stage-batch-{stage}"));
    let next_image = |rng: &mut SeededRng| match opts.image_pool {
        Some(p) if p > 0 => rng.below(p as usize) as u64,
        _ => rng.next_u64() >> 16,
    };
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let image = next_image(&mut rng);
        let sample = match stage {
            1 | 2 => TaskSample {
                task: Task::Caption,
                image_seed: Some(image),
                instruction: "describe the image".to_string(),
                target: Scene::generate(image).caption(),
                boxes: None,
            },
            3 => TaskSample {
                task: Task::Caption,
                image_seed: Some(image),
                instruction: DESCRIBE_PROMPTS[rng.below(DESCRIBE_PROMPTS.len())].to_string(),
                target: sentence(&Scene::generate(image)),
                boxes: None,
            },
            _ => {
                if rng.bernoulli(TEXT_ONLY_SHARE) {
                    let (q, a) = TEXT_QA[rng.below(TEXT_QA.len())];
                    TaskSample {
                        task: Task::Vqa,
                        image_seed: None,
                        instruction: q.to_string(),
                        target: a.to_string(),
                        boxes: None,
                    }
                } else {
                    let task = Task::ALL[rng.below(Task::ALL.len())];
                    multitask_sample(task, image, opts.resolution, &mut rng)
                }
            }
        };
        out.push(sample);
    }
    Ok(out)
}

pub fn read_jsonl(text: &str) -> Result<Vec<TaskSample>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let s: TaskSample = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        s.validate().map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(s);
    }
    Ok(out)
}

pub fn write_jsonl(samples: &[TaskSample]) -> Result<String> {
    let mut out = String::new();
    for s in samples {
        out.push_str(&serde_json::to_string(s)?);
        out.push('\n');
    }
    Ok(out)
}
