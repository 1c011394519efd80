//! Generator and discriminator assembly.

mod config;
mod discriminator;
mod generator;

pub use config::{BlockSpec, DiscriminatorConfig, GeneratorConfig, GeneratorKind, DEFAULT_BLOCKS};
pub use discriminator::{DiscBlock, Discriminator, SnConv};
pub use generator::{GenOutput, Generator, ResBlock};
