//! Regenerates the WAV fixtures under `tests/fixtures`.

use std::path::PathBuf;

use melrvq_core::dsp::write_wav;
use melrvq_core::synth::sine_clip;

fn main() -> melrvq_core::Result<()> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("sine440.wav");
    write_wav(&path, &sine_clip(440.0, 0.8, 2.0, 24_000))?;
    println!("wrote {}", path.display());
    Ok(())
}
