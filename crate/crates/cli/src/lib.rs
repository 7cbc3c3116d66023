pub mod container;
pub mod manifest;
