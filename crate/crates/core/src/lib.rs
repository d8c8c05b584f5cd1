pub mod cli;
pub mod conv;
pub mod dgconv;
pub mod degrade;
pub mod error;
pub mod fsio;
pub mod network;
pub mod params;
pub mod tensor;
pub mod train;
pub mod verify;
