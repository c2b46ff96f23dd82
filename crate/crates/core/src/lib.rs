pub mod config;
pub mod context;
pub mod db;
pub mod eval;
pub mod fixtures;
pub mod llm;
pub mod pipeline;
pub mod prompts;
pub mod sandbox;
pub mod sqltok;
pub mod table_csv;
pub mod tools;
