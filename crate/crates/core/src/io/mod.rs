//! Files on disk: PGM images, checkpoints and dataset directories.

pub mod checkpoint;
pub mod dataset;
pub mod pgm;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use dataset::{read_dataset, write_dataset};
pub use pgm::{read_pgm, write_pgm};
