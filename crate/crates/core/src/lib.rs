//! Grounded extraction and framing analysis for VBAC/RCS counseling notes.

pub mod adjudication;
pub mod backend;
pub mod corpus;
pub mod eligibility;
pub mod extraction;
pub mod framing;
pub mod grounding;
pub mod mock;
pub mod pipeline;
pub mod report;
pub mod review;
pub mod stats;
pub mod synth;
pub mod util;

pub use corpus::{Corpus, DeliveryGroup, PatientRecord, RecordId, Segment};
pub use eligibility::{EligibilityAssessment, EligibilityCategory};
pub use extraction::{ExtractionResult, PromptConfig, PromptVariant};
pub use grounding::{AuditRecord, OutcomeGroup, ReviewCategory};
