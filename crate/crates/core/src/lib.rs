pub mod corpus;
pub mod embedding;
pub mod evaluation;
pub mod gateway;
pub mod pipeline;
pub mod prompt;
pub mod retrieval;
pub mod rules;
pub mod status;
pub mod synthetic;
pub mod util;
