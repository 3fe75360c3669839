//! Regenerates `fixtures/pets_llm.json` from the concept lists in the
//! fixtures module.

use cgbc_core::fixtures::{pets_llm_entries, PETS_MODEL};

fn main() -> std::io::Result<()> {
    let entries = pets_llm_entries(10, 10, PETS_MODEL);
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/pets_llm.json");
    let json = serde_json::to_string_pretty(&entries).expect("entries serialize");
    std::fs::write(path, json + "\n")?;
    println!("wrote {} entries to {path}", entries.len());
    Ok(())
}
