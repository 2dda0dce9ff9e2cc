//! Staging of program-code blocks into the session directory.
//!
//! Layout under the session directory:
//!
//! ```text
//! snippets/latest.<ext>                  last staged block per language
//! snippets/archive/step<N>_block<M>.<ext> every staged block, never overwritten
//! ```

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::StorageFailure;
use crate::parser::{BlockClass, FencedBlock};

pub const SNIPPETS_DIR: &str = "snippets";
pub const ARCHIVE_DIR: &str = "archive";

/// Record of one staged block. Paths are relative to the session directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagedSnippet {
    pub source_step: u32,
    pub source_ordinal: usize,
    pub language_tag: String,
    pub latest_path: PathBuf,
    pub archive_path: PathBuf,
    pub content_hash: String,
}

pub fn extension_for(language_tag: &str) -> &str {
    match language_tag {
        "python" => "py",
        other => other,
    }
}

pub fn latest_relative_path(language_tag: &str) -> PathBuf {
    Path::new(SNIPPETS_DIR).join(format!("latest.{}", extension_for(language_tag)))
}

pub fn archive_relative_path(language_tag: &str, step: u32, ordinal: usize) -> PathBuf {
    Path::new(SNIPPETS_DIR).join(ARCHIVE_DIR).join(format!(
        "step{step}_block{ordinal}.{}",
        extension_for(language_tag)
    ))
}

pub fn content_hash(content: &str) -> String {
    hex::encode(Sha256::digest(content.as_bytes()))
}

fn normalized(body: &str) -> String {
    let mut text = body.to_string();
    if !text.is_empty() && !text.ends_with('\n') {
        text.push('\n');
    }
    text
}

fn storage(path: &Path, cause: io::Error) -> StorageFailure {
    StorageFailure {
        path: path.to_path_buf(),
        cause: cause.to_string(),
    }
}

/// Writes `content` to a temp file beside `path`, syncs it and renames it into place.
pub(crate) fn write_atomic(path: &Path, content: &[u8]) -> Result<(), StorageFailure> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir).map_err(|e| storage(dir, e))?;
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = dir.join(format!(".{file_name}.tmp"));
    let mut file = fs::File::create(&tmp).map_err(|e| storage(&tmp, e))?;
    file.write_all(content).map_err(|e| storage(&tmp, e))?;
    file.sync_all().map_err(|e| storage(&tmp, e))?;
    drop(file);
    fs::rename(&tmp, path).map_err(|e| storage(path, e))
}

/// Creates `path` with `content`. An existing file with identical content is
/// accepted so that a step rolled back after a crash can be re-staged.
fn write_create_new(path: &Path, content: &str) -> Result<(), StorageFailure> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| storage(dir, e))?;
    }
    match fs::OpenOptions::new().write(true).create_new(true).open(path) {
        Ok(mut file) => {
            file.write_all(content.as_bytes())
                .map_err(|e| storage(path, e))?;
            file.sync_all().map_err(|e| storage(path, e))
        }
        Err(e) if e.kind() == io::ErrorKind::AlreadyExists => {
            let existing = fs::read_to_string(path).map_err(|e| storage(path, e))?;
            if existing == content {
                Ok(())
            } else {
                Err(StorageFailure {
                    path: path.to_path_buf(),
                    cause: "archive entry already exists with different content".into(),
                })
            }
        }
        Err(e) => Err(storage(path, e)),
    }
}

/// Stages every `ProgramCode` block of one response, in ordinal order.
///
/// Non-program blocks in `blocks` are skipped. Every write is synced before
/// this returns, so commands from the same response observe the staged code.
pub fn stage(
    blocks: &[(FencedBlock, BlockClass)],
    session_dir: &Path,
    step: u32,
) -> Result<Vec<StagedSnippet>, StorageFailure> {
    let mut program: Vec<(&FencedBlock, &str)> = blocks
        .iter()
        .filter_map(|(b, c)| match c {
            BlockClass::ProgramCode { language } => Some((b, language.as_str())),
            _ => None,
        })
        .collect();
    program.sort_by_key(|(b, _)| b.ordinal);

    let mut staged = Vec::with_capacity(program.len());
    for (block, language) in program {
        let content = normalized(&block.body);
        let latest = latest_relative_path(language);
        let archive = archive_relative_path(language, step, block.ordinal);
        write_create_new(&session_dir.join(&archive), &content)?;
        write_atomic(&session_dir.join(&latest), content.as_bytes())?;
        staged.push(StagedSnippet {
            source_step: step,
            source_ordinal: block.ordinal,
            language_tag: language.to_string(),
            latest_path: latest,
            archive_path: archive,
            content_hash: content_hash(&content),
        });
    }
    Ok(staged)
}

pub fn read_latest(language_tag: &str, session_dir: &Path) -> Result<Option<String>, StorageFailure> {
    let path = session_dir.join(latest_relative_path(language_tag));
    match fs::read_to_string(&path) {
        Ok(text) => Ok(Some(text)),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(storage(&path, e)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parser::{extract_blocks, parse_response, ParserConfig};

    fn parsed(text: &str) -> Vec<(FencedBlock, BlockClass)> {
        parse_response(text, &ParserConfig::default()).blocks
    }

    #[test]
    fn stages_single_block() {
        let dir = tempfile::tempdir().unwrap();
        let staged = stage(&parsed("```python\nx=1\n```\n"), dir.path(), 3).unwrap();
        assert_eq!(staged.len(), 1);
        assert_eq!(
            fs::read_to_string(dir.path().join("snippets/latest.py")).unwrap(),
            "x=1\n"
        );
        assert!(dir.path().join("snippets/archive/step3_block0.py").exists());
        assert_eq!(staged[0].content_hash, content_hash("x=1\n"));
    }

    #[test]
    fn last_writer_wins_and_archive_keeps_all() {
        let dir = tempfile::tempdir().unwrap();
        let text = "```python\na=1\n```\nand\n```python\nb=2\n```\n";
        stage(&parsed(text), dir.path(), 0).unwrap();
        assert_eq!(read_latest("python", dir.path()).unwrap().unwrap(), "b=2\n");
        assert_eq!(
            fs::read_to_string(dir.path().join("snippets/archive/step0_block0.py")).unwrap(),
            "a=1\n"
        );
        assert_eq!(
            fs::read_to_string(dir.path().join("snippets/archive/step0_block1.py")).unwrap(),
            "b=2\n"
        );
    }

    #[test]
    fn no_program_blocks_no_writes() {
        let dir = tempfile::tempdir().unwrap();
        let staged = stage(&parsed("```cmd\ndir\n```\n"), dir.path(), 0).unwrap();
        assert!(staged.is_empty());
        assert!(!dir.path().join(SNIPPETS_DIR).exists());
    }

    #[test]
    fn read_latest_absent_then_overwritten() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(read_latest("python", dir.path()).unwrap(), None);
        stage(&parsed("```python\na\n```\n"), dir.path(), 0).unwrap();
        stage(&parsed("```python\nb\n```\n"), dir.path(), 1).unwrap();
        assert_eq!(read_latest("python", dir.path()).unwrap().unwrap(), "b\n");
    }

    #[test]
    fn archive_is_never_overwritten() {
        let dir = tempfile::tempdir().unwrap();
        stage(&parsed("```python\na\n```\n"), dir.path(), 0).unwrap();
        // identical re-stage (crash rollback) is fine
        stage(&parsed("```python\na\n```\n"), dir.path(), 0).unwrap();
        let err = stage(&parsed("```python\nchanged\n```\n"), dir.path(), 0).unwrap_err();
        assert!(err.path.ends_with("snippets/archive/step0_block0.py"));
        assert_eq!(
            fs::read_to_string(dir.path().join("snippets/archive/step0_block0.py")).unwrap(),
            "a\n"
        );
    }

    #[test]
    fn non_python_extension_is_tag() {
        let mut cfg = ParserConfig::default();
        cfg.tags.insert("js".into(), crate::parser::TagKind::Program);
        let blocks = parse_response("```js\nlet x\n```\n", &cfg).blocks;
        let dir = tempfile::tempdir().unwrap();
        stage(&blocks, dir.path(), 2).unwrap();
        assert!(dir.path().join("snippets/latest.js").exists());
        assert!(dir.path().join("snippets/archive/step2_block0.js").exists());
        assert_eq!(extract_blocks("x").len(), 0);
    }
}
