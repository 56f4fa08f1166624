pub mod graph;
pub mod search;
pub mod gateway;
pub mod prompt;
