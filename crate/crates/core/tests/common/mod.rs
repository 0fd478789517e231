pub mod fixtures;
pub mod gradcheck;
