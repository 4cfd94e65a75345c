pub mod check;
pub mod curriculum;
pub mod generate;
pub mod io;
pub mod scene;

pub use check::verify_example;
pub use curriculum::{make_stage_plan, rewrite_for_stage, SerializedSequence, StagePlan, StagedPair};
pub use generate::{generate_dataset, CurriculumExample, TaskMix};
pub use scene::{Modality, SceneSpec};
