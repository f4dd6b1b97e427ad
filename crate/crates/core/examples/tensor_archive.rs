//! Writes and reads the binary tensor archive: an 8-byte header length, a
//! JSON header with offsets, then little-endian data.

use giftsw::archive::{DType, TensorArchive};
use giftsw::tensor::Tensor;

fn main() -> giftsw::Result<()> {
    let mut archive = TensorArchive::new();
    archive.insert("weights", DType::F64, Tensor::matrix(&[&[1.0, -2.5], &[0.125, 3.0]]));
    archive.insert("codes", DType::F32, Tensor::vector(&[-2.0, 1.0, 0.0]));
    let bytes = archive.to_bytes()?;
    let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    println!("header: {}", std::str::from_utf8(&bytes[8..8 + header_len]).unwrap());

    let dir = std::env::temp_dir().join("giftsw-archive-example");
    std::fs::create_dir_all(&dir).ok();
    let path = dir.join("demo.archive");
    archive.save(&path)?;
    let back = TensorArchive::load(&path)?;
    assert_eq!(back, archive);
    println!("round trip ok: {:?}", back.names().collect::<Vec<_>>());
    Ok(())
}
