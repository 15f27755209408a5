//! The checkpoint format: a magic tag, the canonical config text, then
//! name-sorted tensor records. Saving, loading, and saving again yields
//! byte-identical files, so checkpoints diff and hash cleanly.

use autosize::checkpoint::{load_model, read_records, save_model};
use autosize::model::{ModelConfig, TransformerModel};

fn main() -> autosize::Result<()> {
    let config = ModelConfig::uniform(1, 1, 16, 2, 32, 16, 16, 0.0);
    let model = TransformerModel::init(config, 99)?;

    let dir = std::env::temp_dir().join(format!("autosize-ckpt-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    let first = dir.join("model.ckpt");
    let second = dir.join("model2.ckpt");

    save_model(&model, &first)?;
    let reloaded = load_model(&first)?;
    save_model(&reloaded, &second)?;
    let bytes_a = std::fs::read(&first)?;
    let bytes_b = std::fs::read(&second)?;
    assert_eq!(bytes_a, bytes_b, "save-load-save is byte stable");
    println!(
        "checkpoint is {} bytes, byte-stable across a reload",
        bytes_a.len()
    );

    let (header, records) = read_records(&first)?;
    println!("header:\n{}", header.trim_end());
    println!("first tensors of {}:", records.len());
    for record in records.iter().take(5) {
        let dims: Vec<String> = record.shape.iter().map(|d| d.to_string()).collect();
        println!("  {:<20} [{}]", record.name, dims.join(", "));
    }

    for (a, b) in model.params().iter().zip(reloaded.params()) {
        assert_eq!(a.id, b.id);
        for (&x, &y) in a.value.data().iter().zip(b.value.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
    println!("all {} tensors reload bit-exactly", model.params().len());
    std::fs::remove_dir_all(&dir).ok();
    Ok(())
}
