//! Writes a synthetic dataset manifest: walking figures whose body scale and
//! gait frequency depend on the age class.
//!
//! ```text
//! cargo run --release --example make_synthetic -- --out data --per-class 8 --render
//! ```
//!
//! Without `--render` the manifest points at `synth:` paths that are
//! re-rendered on demand; with it every video is written as a `.agv` file.

use std::path::PathBuf;

use ageformer::datamodel::write_manifest_file;
use ageformer::preprocessing::decode::write_raw_video;
use ageformer::synthetic::{synthetic_manifest, SynthDatasetConfig, SynthVideo};
use clap::Parser;

#[derive(Parser)]
struct Opts {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    per_class: usize,
    #[arg(long, default_value_t = 40)]
    frames: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Adds a full-body person box per frame.
    #[arg(long)]
    person_boxes: bool,
    /// Writes pixel data to `videos/*.agv`.
    #[arg(long)]
    render: bool,
}

fn main() -> ageformer::Result<()> {
    let o = Opts::parse();
    let mut manifest = synthetic_manifest(&SynthDatasetConfig {
        per_class: o.per_class,
        frames: o.frames,
        width: o.size,
        height: o.size,
        seed: o.seed,
        with_person_boxes: o.person_boxes,
        ..Default::default()
    })?;
    std::fs::create_dir_all(o.out.join("videos")).map_err(|e| ageformer::Error::io(&o.out, e))?;
    if o.render {
        for r in &mut manifest.records {
            let video = SynthVideo::from_path(&r.path)?;
            let frames: Vec<_> = (0..r.frame_count).map(|t| video.render(t)).collect();
            let rel = format!("videos/{}.agv", r.id);
            write_raw_video(&o.out.join(&rel), &frames)?;
            r.path = rel;
        }
    }
    let path = o.out.join("manifest.jsonl");
    write_manifest_file(&manifest, &path)?;
    println!("{} records -> {}", manifest.len(), path.display());
    Ok(())
}
