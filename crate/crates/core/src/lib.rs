pub mod circuit;
pub mod clifford;
pub mod ensembles;
pub mod fields;
pub mod linalg;
pub mod sim;
pub mod verify;
