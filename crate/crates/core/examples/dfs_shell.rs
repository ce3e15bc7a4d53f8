//! Drive the engine through the `dfs` command language.
//!
//! ```text
//! cargo run --example dfs_shell
//! ```

use rdrive::command::{self, default_setup};
use rdrive::engine::StorageEngine;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let engine = StorageEngine::new(default_setup())?;
    let me = engine.devices()[0].clone();
    let dir = tempfile_dir()?;
    let local = dir.join("notes.txt");
    std::fs::write(&local, "meet at the north ridge at dawn\n")?;
    let back = dir.join("notes.back");

    let script = [
        "dfs -mkdir /team WORLD".to_string(),
        format!("dfs -put {} /team/notes.txt WORLD --wa 0.9", local.display()),
        "dfs -ls /team".into(),
        "dfs -getfacl /team/notes.txt".into(),
        format!("dfs -get /team/notes.txt {}", back.display()),
        "dfs -ls /team/missing".into(),
        "dfs -setfacl /team".into(),
    ];
    for line in &script {
        let out = command::execute_line(line, &engine, &me);
        println!("$ {line}\n{}{}[exit {}]", out.stdout, out.stderr, out.code);
    }
    print!("{}", std::fs::read_to_string(&back)?);
    std::fs::remove_dir_all(dir)?;
    Ok(())
}

fn tempfile_dir() -> std::io::Result<std::path::PathBuf> {
    let dir = std::env::temp_dir().join(format!("dfs-shell-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}
