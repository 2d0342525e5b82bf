//! Step-trace logs that load must write and reload cleanly.

#![no_main]

use std::io::Write;

use dep::engine::{read_traces, write_traces};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let mut file = tempfile::NamedTempFile::new().expect("temp file");
    file.write_all(data).expect("write input");
    if let Ok(traces) = read_traces(file.path()) {
        let out = tempfile::NamedTempFile::new().expect("temp file");
        write_traces(out.path(), &traces).expect("accepted traces write");
        let again = read_traces(out.path()).expect("written traces read");
        assert_eq!(traces.len(), again.len());
    }
});
