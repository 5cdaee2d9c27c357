pub mod blob;
pub mod table;
pub mod state;
pub mod llm;
pub mod registry;
pub mod fabric;
pub mod worker;
pub mod manager;
pub mod ops;
