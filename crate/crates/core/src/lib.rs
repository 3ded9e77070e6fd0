//! Construction of grounded chain-of-thought chart datasets and relaxed-accuracy
//! evaluation of chart question answering.
//!
//! The build pipeline synthesizes declarative chart specs, generates
//! question/answer pairs with step-by-step reasoning, inserts a unique marker
//! for every grounding step, re-renders, detects the marker to obtain a
//! bounding box, and expands each chart into instruction records.

pub mod answer;
pub mod bbox;
pub mod chart_spec;
pub mod cot;
pub mod eval;
pub mod instruction;
pub mod llm_client;
pub mod marker;
pub mod pipeline;
pub mod prompts;
pub mod renderer;

pub use answer::Answer;
pub use bbox::{Canvas, NormBBox, NormFormat, PixelBBox};
pub use chart_spec::{ChartSpec, ChartType, Series};
pub use cot::{CotSample, Step, StepKind};
pub use instruction::{InstructionSample, RecordKind};
pub use pipeline::{DatasetManifest, PipelineConfig, Stage};
pub use renderer::{ElementRef, GeometryMap, Role};

/// The unique marker character inserted into chart text.
pub const MARKER_CHAR: char = '@';
