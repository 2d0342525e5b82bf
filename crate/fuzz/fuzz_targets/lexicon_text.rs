//! The lexicon grammar and vocabulary binding must reject garbage with
//! errors, never panics.

#![no_main]

use std::sync::OnceLock;

use dep::mockvlm::{LanguageParams, MockLanguage};
use dep::probe::LexiconSource;
use libfuzzer_sys::fuzz_target;

fn language() -> &'static MockLanguage {
    static LANG: OnceLock<MockLanguage> = OnceLock::new();
    LANG.get_or_init(|| MockLanguage::generate(LanguageParams::default()).expect("default language"))
}

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(source) = LexiconSource::parse(text) {
        let _ = source.resolve(language().vocab());
    }
});
