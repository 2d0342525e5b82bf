//! Calibration files that load must save and load again cleanly.

#![no_main]

use std::io::Write;

use dep::bench::{load_calibration, save_calibration};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let mut file = tempfile::NamedTempFile::new().expect("temp file");
    file.write_all(data).expect("write input");
    if let Ok(cal) = load_calibration(file.path()) {
        let out = tempfile::NamedTempFile::new().expect("temp file");
        save_calibration(out.path(), &cal).expect("accepted calibration saves");
        let again = load_calibration(out.path()).expect("saved calibration loads");
        assert_eq!(cal.rows.len(), again.rows.len());
    }
});
