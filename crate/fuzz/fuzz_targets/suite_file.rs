//! Suite files that load must save and load again cleanly.

#![no_main]

use std::io::Write;

use dep::bench::{load_suite, save_suite};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let mut file = tempfile::NamedTempFile::new().expect("temp file");
    file.write_all(data).expect("write input");
    if let Ok(suite) = load_suite(file.path()) {
        let out = tempfile::NamedTempFile::new().expect("temp file");
        save_suite(out.path(), &suite).expect("accepted suite saves");
        load_suite(out.path()).expect("saved suite loads");
    }
});
