mod common;

use common::*;

/// Set `MOSS_BLESS=1` to rewrite the committed files.
#[test]
fn query_maps_match_golden_files() {
    if std::env::var_os("MOSS_BLESS").is_some() {
        std::fs::create_dir_all(golden_dir()).unwrap();
        for p in std::fs::read_dir(golden_dir()).unwrap() {
            std::fs::remove_file(p.unwrap().path()).unwrap();
        }
        render_golden(&golden_dir());
    }
    let dir = tempfile::tempdir().unwrap();
    let written = render_golden(dir.path());
    assert_eq!(written.len(), 2 * 3 + 2);
    assert_eq!(golden_mismatches(dir.path()), Vec::<String>::new());
}
