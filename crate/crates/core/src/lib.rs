pub mod data;
pub mod engine;
pub mod geometry;
pub mod phantom;
pub mod nets;
pub mod losses;
pub mod training;
pub mod synthesis;
pub mod evaluation;
