//! Desk-scale knowledge distillation with student-informed curation.

pub mod corpus;
pub mod curriculum;
pub mod divergence;
pub mod metrics;
pub mod reflect;
pub mod seeding;
pub mod tinylm;
pub mod trainer;

pub use corpus::{Dataset, PromptResponsePair, TokenId, Vocabulary};
pub use curriculum::{CurriculumOrder, CurriculumPlan, ScheduleConfig};
pub use divergence::{Distribution, DivergenceKind, DivergenceSpec};
pub use reflect::{CurationConfig, ReflectionRecord};
pub use tinylm::{LmConfig, TinyLm};
pub use trainer::{RunConfig, RunMode, TrainingReport};
