pub mod engine;
pub mod evaluation;
pub mod evolution;
pub mod genome;
pub mod search_space;
pub mod selection;
pub mod weight_store;
