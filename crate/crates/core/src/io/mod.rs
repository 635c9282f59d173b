//! Flat config files, the tensor file format and the tile dataset layout.

pub mod kv;
mod record;
mod tiles;

pub use record::{
    decode_tensor, encode_tensor, load_tensor, save_tensor, ByteReader, Record, TENSOR_MAGIC,
};
pub use tiles::{read_tiles, write_tiles, MANIFEST};
