//! Regenerate the bundled test fixture.
//!
//! cargo run --example make_fixture -- [out_dir]

use std::path::PathBuf;

use rapsg::pipeline::sha256_file;
use rapsg::synthetic::{generate, FixtureSpec, FIXTURE_FILES};

fn main() -> anyhow::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures"));
    let fixture = generate(FixtureSpec::default())?;
    fixture.write_to(&dir)?;
    for name in FIXTURE_FILES {
        println!("{}  {name}", sha256_file(&dir.join(name))?);
    }
    Ok(())
}
