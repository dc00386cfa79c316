pub mod add;
pub mod config;
pub mod corpus;
pub mod detector;
pub mod eval;
pub mod generator;
pub mod lm;
pub mod pipeline;
pub mod rewrite;
pub mod selector;
pub mod synthetic;
pub mod text;
pub mod toy;
pub mod train;
pub mod transformer;
pub mod view;
