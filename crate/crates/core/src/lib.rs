//! Harness for measuring and correcting confidence calibration of language
//! models that iteratively critique and revise their own answers.

pub mod backends;
pub mod calibration;
pub mod composition;
pub mod dataset;
pub mod engine;
pub mod runner;
pub mod seeding;
