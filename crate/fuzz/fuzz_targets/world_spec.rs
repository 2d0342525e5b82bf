//! World specs that load must save and load again cleanly.

#![no_main]

use std::io::Write;

use dep::mockvlm::{load_world_spec, save_world_spec};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let mut file = tempfile::NamedTempFile::new().expect("temp file");
    file.write_all(data).expect("write input");
    if let Ok(spec) = load_world_spec(file.path()) {
        let out = tempfile::NamedTempFile::new().expect("temp file");
        save_world_spec(out.path(), &spec).expect("accepted spec saves");
        let again = load_world_spec(out.path()).expect("saved spec loads");
        assert_eq!(spec.seed, again.seed);
    }
});
