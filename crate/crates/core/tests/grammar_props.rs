mod common;

use common::grammar;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rdrive::command::{self, tokenize, CommandError, LexError, Token};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn derivations_parse_and_render_back(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ast = grammar::derivation(&mut rng);
        let canonical = command::render(&ast);
        let text = grammar::spaced(&mut rng, &canonical);
        let parsed = command::parse_line(&text).unwrap();
        prop_assert_eq!(&parsed, &ast);
        prop_assert_eq!(command::render(&parsed), canonical);
    }

    #[test]
    fn violations_are_rejected_where_they_occur(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ast = grammar::derivation(&mut rng);
        let (text, at) = grammar::violation(&mut rng, &ast);
        let err = command::parse_line(&text).unwrap_err();
        prop_assert_eq!(err.position(), at, "{:?} -> {}", text, err);
    }

    #[test]
    fn arbitrary_input_never_panics(text in "\\PC{0,80}") {
        if let Err(e) = command::parse_line(&text) {
            prop_assert!(e.position() <= text.len());
        }
    }

    #[test]
    fn token_offsets_point_at_their_text(text in "[ \\t]{0,3}(dfs|-ls|--wa|OWNER|/[a-z]{1,5}|[a-z]{40})([ \\t]{1,3}(dfs|-ls|--wa|OWNER|/[a-z]{1,5}|[a-z]{40})){0,6}") {
        for s in tokenize(&text).unwrap() {
            let word = text[s.offset..].split([' ', '\t']).next().unwrap();
            prop_assert_eq!(s.token.to_string(), word);
        }
    }
}

#[test]
fn lexer_errors_carry_offsets() {
    assert_eq!(tokenize("dfs -ls /a\u{7}"), Err(LexError::IllegalCharacter { offset: 10, ch: '\u{7}' }));
    let e = command::parse_line("dfs -list /").unwrap_err();
    assert!(matches!(e, CommandError::Lex(LexError::MalformedOption { offset: 4, .. })));
    let e = command::parse_line("dfs -ls / --size 3").unwrap_err();
    assert_eq!(e.position(), 10);
}

#[test]
fn forty_characters_make_a_guid() {
    let g = "x".repeat(40);
    assert!(matches!(tokenize(&g).unwrap()[0].token, Token::Guid(_)));
    assert!(matches!(tokenize(&"x".repeat(39)).unwrap()[0].token, Token::Path(_)));
    assert!(matches!(tokenize(&format!("/{}", "x".repeat(39))).unwrap()[0].token, Token::Path(_)));
}
