//! Run-record logs that load must persist and reload to the same canonical
//! form.

#![no_main]

use std::io::Write;

use dep::bench::{canonical_json, load_runs, persist_runs};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let mut file = tempfile::NamedTempFile::new().expect("temp file");
    file.write_all(data).expect("write input");
    if let Ok(records) = load_runs(file.path()) {
        let out = tempfile::NamedTempFile::new().expect("temp file");
        persist_runs(out.path(), &records).expect("accepted records persist");
        let again = load_runs(out.path()).expect("persisted records load");
        assert_eq!(records.len(), again.len());
        for (a, b) in records.iter().zip(&again) {
            assert_eq!(
                canonical_json(a).expect("canonical form"),
                canonical_json(b).expect("canonical form")
            );
        }
    }
});
