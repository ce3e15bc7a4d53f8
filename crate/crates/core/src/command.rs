//! The `dfs` command language.
//!
//! ```text
//! COMMAND    ::= 'dfs' OPTION ARGUMENT FLAG*
//! OPTION     ::= '-put' | '-get' | '-mkdir' | '-ls' | '-rm' | '-setfacl' | '-getfacl'
//! ARGUMENT   ::= PATH | PERMISSION | PATH PERMISSION      (narrowed per option below)
//! PERMISSION ::= 'OWNER' | 'WORLD' | USERS
//! USERS      ::= GUID | USERS GUID
//! FLAG       ::= '--wa' REAL | '--ttl' REAL | '--block-size' INTEGER
//! ```
//!
//! | option   | arguments                     |
//! |----------|-------------------------------|
//! | put      | local rdrive [permission]     |
//! | get      | rdrive local                  |
//! | mkdir    | rdrive [permission]           |
//! | ls, rm, getfacl | rdrive                 |
//! | setfacl  | rdrive permission             |
//!
//! Tokens are whitespace separated; paths cannot contain whitespace and there
//! is no quoting. A 40-character token not starting with `/` is a GUID.

use crate::engine::{EngineError, PutRequest, StorageEngine};
use crate::metadata::MetaError;
use crate::planner::PlanError;
use crate::types::{is_guid_text, validate_path, AccessControlList, AclMode, Guid, GUID_LEN};
use std::fmt;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CommandOption {
    Put,
    Get,
    Mkdir,
    Ls,
    Rm,
    Setfacl,
    Getfacl,
}

impl CommandOption {
    pub const ALL: [CommandOption; 7] = [
        CommandOption::Put,
        CommandOption::Get,
        CommandOption::Mkdir,
        CommandOption::Ls,
        CommandOption::Rm,
        CommandOption::Setfacl,
        CommandOption::Getfacl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CommandOption::Put => "put",
            CommandOption::Get => "get",
            CommandOption::Mkdir => "mkdir",
            CommandOption::Ls => "ls",
            CommandOption::Rm => "rm",
            CommandOption::Setfacl => "setfacl",
            CommandOption::Getfacl => "getfacl",
        }
    }

    fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|o| o.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FlagKind {
    Wa,
    Ttl,
    BlockSize,
}

impl FlagKind {
    pub const ALL: [FlagKind; 3] = [FlagKind::Wa, FlagKind::Ttl, FlagKind::BlockSize];

    pub fn name(self) -> &'static str {
        match self {
            FlagKind::Wa => "wa",
            FlagKind::Ttl => "ttl",
            FlagKind::BlockSize => "block-size",
        }
    }

    fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Token {
    Dfs,
    Opt(CommandOption),
    Flag(FlagKind),
    Owner,
    World,
    Guid(Guid),
    Path(String),
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Token::Dfs => write!(f, "dfs"),
            Token::Opt(o) => write!(f, "-{}", o.name()),
            Token::Flag(k) => write!(f, "--{}", k.name()),
            Token::Owner => write!(f, "OWNER"),
            Token::World => write!(f, "WORLD"),
            Token::Guid(g) => write!(f, "{}", g.as_str()),
            Token::Path(p) => write!(f, "{p}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Spanned {
    pub token: Token,
    /// Byte offset of the token's first character.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LexError {
    #[error("illegal character {ch:?} at byte {offset}")]
    IllegalCharacter { offset: usize, ch: char },
    #[error("unknown option {text:?} at byte {offset}")]
    MalformedOption { offset: usize, text: String },
}

impl LexError {
    pub fn offset(&self) -> usize {
        match self {
            LexError::IllegalCharacter { offset, .. } | LexError::MalformedOption { offset, .. } => *offset,
        }
    }
}

fn is_separator(c: char) -> bool {
    matches!(c, ' ' | '\t' | '\n' | '\r')
}

pub fn tokenize(input: &str) -> Result<Vec<Spanned>, LexError> {
    if let Some((offset, ch)) = input.char_indices().find(|&(_, c)| !is_separator(c) && !(' '..='~').contains(&c)) {
        return Err(LexError::IllegalCharacter { offset, ch });
    }
    let mut out = Vec::new();
    let mut rest = input;
    let mut base = 0;
    while let Some(start) = rest.find(|c: char| !is_separator(c)) {
        let word_len = rest[start..].find(is_separator).unwrap_or(rest.len() - start);
        let word = &rest[start..start + word_len];
        let offset = base + start;
        out.push(Spanned { token: classify(word, offset)?, offset });
        base += start + word_len;
        rest = &rest[start + word_len..];
    }
    Ok(out)
}

fn classify(word: &str, offset: usize) -> Result<Token, LexError> {
    let malformed = || LexError::MalformedOption { offset, text: word.to_string() };
    Ok(if word == "dfs" {
        Token::Dfs
    } else if let Some(name) = word.strip_prefix("--") {
        Token::Flag(FlagKind::from_name(name).ok_or_else(malformed)?)
    } else if let Some(name) = word.strip_prefix('-') {
        Token::Opt(CommandOption::from_name(name).ok_or_else(malformed)?)
    } else if word == "OWNER" {
        Token::Owner
    } else if word == "WORLD" {
        Token::World
    } else if word.len() == GUID_LEN && !word.starts_with('/') && is_guid_text(word) {
        Token::Guid(Guid::new(word).expect("checked GUID text"))
    } else {
        Token::Path(word.to_string())
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Permission {
    Owner,
    World,
    Users(Vec<Guid>),
}

impl Permission {
    /// The ACL this permission gives `owner`'s rnode.
    pub fn to_acl(&self, owner: &Guid) -> AccessControlList {
        match self {
            Permission::Owner => AccessControlList::owner_only(owner.clone()),
            Permission::World => AccessControlList::world(owner.clone()),
            Permission::Users(list) => AccessControlList::users(owner.clone(), list.iter().cloned()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Flags {
    pub wa: Option<f64>,
    pub ttl: Option<f64>,
    pub block_size: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CommandAst {
    pub option: CommandOption,
    pub local_path: Option<String>,
    pub rdrive_path: Option<String>,
    pub permission: Option<Permission>,
    pub flags: Flags,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("at byte {position}: expected {expected}, found {found}")]
pub struct ParseError {
    pub position: usize,
    pub expected: String,
    pub found: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CommandError {
    #[error(transparent)]
    Lex(#[from] LexError),
    #[error(transparent)]
    Parse(#[from] ParseError),
}

impl CommandError {
    pub fn position(&self) -> usize {
        match self {
            CommandError::Lex(e) => e.offset(),
            CommandError::Parse(e) => e.position,
        }
    }
}

struct Parser<'a> {
    tokens: &'a [Spanned],
    pos: usize,
    end: usize,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&'a Spanned> {
        self.tokens.get(self.pos)
    }

    fn here(&self) -> usize {
        self.peek().map(|s| s.offset).unwrap_or(self.end)
    }

    fn error(&self, expected: &str) -> ParseError {
        ParseError {
            position: self.here(),
            expected: expected.to_string(),
            found: self.peek().map(|s| format!("{:?}", s.token.to_string())).unwrap_or_else(|| "end of input".into()),
        }
    }

    fn path(&mut self, expected: &str) -> Result<String, ParseError> {
        match self.peek() {
            Some(Spanned { token: Token::Path(p), .. }) => {
                self.pos += 1;
                Ok(p.clone())
            }
            _ => Err(self.error(expected)),
        }
    }

    fn rdrive_path(&mut self) -> Result<String, ParseError> {
        let at = self.pos;
        let p = self.path("PATH")?;
        if validate_path(&p).is_err() {
            self.pos = at;
            return Err(self.error("absolute PATH"));
        }
        Ok(p)
    }

    fn permission(&mut self, required: bool) -> Result<Option<Permission>, ParseError> {
        match self.peek().map(|s| &s.token) {
            Some(Token::Owner) => {
                self.pos += 1;
                Ok(Some(Permission::Owner))
            }
            Some(Token::World) => {
                self.pos += 1;
                Ok(Some(Permission::World))
            }
            Some(Token::Guid(_)) => {
                let mut users = Vec::new();
                while let Some(Spanned { token: Token::Guid(g), .. }) = self.peek() {
                    users.push(g.clone());
                    self.pos += 1;
                }
                Ok(Some(Permission::Users(users)))
            }
            _ if required => Err(self.error("PERMISSION")),
            _ => Ok(None),
        }
    }

    fn flags(&mut self) -> Result<Flags, ParseError> {
        let mut flags = Flags::default();
        while let Some(s) = self.peek() {
            let Token::Flag(kind) = s.token else {
                return Err(self.error("flag or end of input"));
            };
            let seen = match kind {
                FlagKind::Wa => flags.wa.is_some(),
                FlagKind::Ttl => flags.ttl.is_some(),
                FlagKind::BlockSize => flags.block_size.is_some(),
            };
            if seen {
                return Err(self.error("each flag at most once"));
            }
            self.pos += 1;
            let at = self.pos;
            let text = self.path("flag value")?;
            let bad = |p: &mut Self, what: &str| {
                p.pos = at;
                Err(p.error(what))
            };
            match kind {
                FlagKind::Wa => match text.parse::<f64>() {
                    Ok(v) if (0.0..=1.0).contains(&v) => flags.wa = Some(v),
                    _ => return bad(self, "real in [0, 1]"),
                },
                FlagKind::Ttl => match text.parse::<f64>() {
                    Ok(v) if v > 0.0 && v.is_finite() => flags.ttl = Some(v),
                    _ => return bad(self, "positive seconds"),
                },
                FlagKind::BlockSize => match text.parse::<usize>() {
                    Ok(v) if v > 0 => flags.block_size = Some(v),
                    _ => return bad(self, "positive byte count"),
                },
            }
        }
        Ok(flags)
    }
}

/// Parse a token stream; `input_len` positions errors at end of input.
pub fn parse(tokens: &[Spanned], input_len: usize) -> Result<CommandAst, ParseError> {
    let mut p = Parser { tokens, pos: 0, end: input_len };
    match p.peek() {
        Some(Spanned { token: Token::Dfs, .. }) => p.pos += 1,
        _ => return Err(p.error("'dfs'")),
    }
    let option = match p.peek() {
        Some(Spanned { token: Token::Opt(o), .. }) => {
            p.pos += 1;
            *o
        }
        _ => return Err(p.error("OPTION")),
    };
    let mut ast = CommandAst { option, local_path: None, rdrive_path: None, permission: None, flags: Flags::default() };
    match option {
        CommandOption::Put => {
            ast.local_path = Some(p.path("PATH")?);
            ast.rdrive_path = Some(p.rdrive_path()?);
            ast.permission = p.permission(false)?;
        }
        CommandOption::Get => {
            ast.rdrive_path = Some(p.rdrive_path()?);
            ast.local_path = Some(p.path("PATH")?);
        }
        CommandOption::Mkdir => {
            ast.rdrive_path = Some(p.rdrive_path()?);
            ast.permission = p.permission(false)?;
        }
        CommandOption::Ls | CommandOption::Rm | CommandOption::Getfacl => {
            ast.rdrive_path = Some(p.rdrive_path()?);
        }
        CommandOption::Setfacl => {
            ast.rdrive_path = Some(p.rdrive_path()?);
            ast.permission = p.permission(true)?;
        }
    }
    ast.flags = p.flags()?;
    Ok(ast)
}

pub fn parse_line(input: &str) -> Result<CommandAst, CommandError> {
    let tokens = tokenize(input)?;
    Ok(parse(&tokens, input.len())?)
}

/// Canonical text of a command, single-space separated.
pub fn render(ast: &CommandAst) -> String {
    let mut words = vec!["dfs".to_string(), format!("-{}", ast.option.name())];
    let rdrive = ast.rdrive_path.clone().unwrap_or_default();
    let local = ast.local_path.clone().unwrap_or_default();
    match ast.option {
        CommandOption::Put => words.extend([local, rdrive]),
        CommandOption::Get => words.extend([rdrive, local]),
        _ => words.push(rdrive),
    }
    match &ast.permission {
        Some(Permission::Owner) => words.push("OWNER".into()),
        Some(Permission::World) => words.push("WORLD".into()),
        Some(Permission::Users(list)) => words.extend(list.iter().map(|g| g.as_str().to_string())),
        None => {}
    }
    if let Some(v) = ast.flags.wa {
        words.extend(["--wa".into(), v.to_string()]);
    }
    if let Some(v) = ast.flags.ttl {
        words.extend(["--ttl".into(), v.to_string()]);
    }
    if let Some(v) = ast.flags.block_size {
        words.extend(["--block-size".into(), v.to_string()]);
    }
    words.join(" ")
}

/// Exit codes; a stable contract of the CLI.
pub mod exit {
    pub const OK: i32 = 0;
    pub const OTHER: i32 = 1;
    pub const PARSE: i32 = 2;
    pub const NOT_FOUND: i32 = 3;
    pub const PERMISSION: i32 = 4;
    pub const QUORUM: i32 = 5;
    pub const IRRECOVERABLE: i32 = 6;
    pub const INFEASIBLE_PLAN: i32 = 7;
    pub const EXISTS: i32 = 8;
    pub const NAMESPACE: i32 = 9;
    pub const INTEGRITY: i32 = 10;
    pub const IO: i32 = 11;
}

pub fn exit_code(err: &EngineError) -> i32 {
    match err {
        EngineError::Metadata(m) => match m {
            MetaError::NotFound(_) | MetaError::ParentNotFound(_) => exit::NOT_FOUND,
            MetaError::PermissionDenied(_) => exit::PERMISSION,
            MetaError::QuorumUnavailable { .. } => exit::QUORUM,
            MetaError::AlreadyExists(_) => exit::EXISTS,
            MetaError::NotADirectory(_) | MetaError::DirectoryNotEmpty(_) => exit::NAMESPACE,
            _ => exit::OTHER,
        },
        EngineError::Plan(PlanError::NoFeasiblePlan(_)) => exit::INFEASIBLE_PLAN,
        EngineError::IrrecoverableBlock { .. } => exit::IRRECOVERABLE,
        EngineError::AuthenticationFailure => exit::INTEGRITY,
        EngineError::IsADirectory(_) => exit::NAMESPACE,
        EngineError::Io(_) => exit::IO,
        _ => exit::OTHER,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outcome {
    pub stdout: String,
    pub stderr: String,
    pub code: i32,
}

impl Outcome {
    fn ok(stdout: String) -> Self {
        Outcome { stdout, stderr: String::new(), code: exit::OK }
    }

    fn fail(code: i32, message: impl fmt::Display) -> Self {
        Outcome { stdout: String::new(), stderr: format!("rdrive: {message}\n"), code }
    }
}

/// Run one parsed command as `caller`. Network traffic started by the
/// command is run to completion before returning.
pub fn execute(ast: &CommandAst, engine: &StorageEngine, caller: &Guid) -> Outcome {
    let result = run(ast, engine, caller);
    engine.flush();
    match result {
        Ok(out) => Outcome::ok(out),
        Err(e) => Outcome::fail(exit_code(&e), e),
    }
}

/// Lex, parse and execute one line.
pub fn execute_line(line: &str, engine: &StorageEngine, caller: &Guid) -> Outcome {
    match parse_line(line) {
        Ok(ast) => execute(&ast, engine, caller),
        Err(e) => Outcome::fail(exit::PARSE, e),
    }
}

fn run(ast: &CommandAst, engine: &StorageEngine, caller: &Guid) -> Result<String, EngineError> {
    let rdrive = ast.rdrive_path.as_deref().unwrap_or("/");
    let acl = ast.permission.as_ref().map(|p| p.to_acl(caller));
    match ast.option {
        CommandOption::Put => {
            let local = ast.local_path.as_deref().unwrap_or_default();
            let data = std::fs::read(local).map_err(|e| EngineError::Io(format!("{local}: {e}")))?;
            let mut req = PutRequest::new(rdrive, data);
            req.acl = acl;
            req.availability_weight = ast.flags.wa;
            req.block_size = ast.flags.block_size;
            req.dispatch_ttl = ast.flags.ttl;
            let r = engine.put(&req, caller)?;
            Ok(format!("{rdrive}: {} bytes, {} blocks, k={} n={}\n", r.file_size, r.block_count, r.k, r.n))
        }
        CommandOption::Get => {
            let local = ast.local_path.as_deref().unwrap_or_default();
            let data = engine.get_with_ttl(rdrive, caller, ast.flags.ttl)?;
            std::fs::write(local, &data).map_err(|e| EngineError::Io(format!("{local}: {e}")))?;
            Ok(format!("{local}: {} bytes\n", data.len()))
        }
        CommandOption::Mkdir => {
            engine.mkdir(rdrive, acl, caller)?;
            Ok(String::new())
        }
        CommandOption::Ls => {
            let names = engine.ls(rdrive, caller)?.names();
            Ok(names.into_iter().map(|n| n + "\n").collect())
        }
        CommandOption::Rm => {
            engine.rm(rdrive, caller)?;
            Ok(String::new())
        }
        CommandOption::Getfacl => {
            let acl = engine.get_acl(rdrive, caller)?;
            let mode = match acl.mode {
                AclMode::Owner => "OWNER",
                AclMode::World => "WORLD",
                AclMode::Users => "USERS",
            };
            let mut out = format!("owner: {}\nmode: {mode}\n", acl.owner);
            for u in &acl.user_list {
                out.push_str(&format!("user: {u}\n"));
            }
            Ok(out)
        }
        CommandOption::Setfacl => {
            engine.set_acl(rdrive, acl.expect("parser requires a permission"), caller)?;
            Ok(String::new())
        }
    }
}

/// Configuration of the `rdrive` binary, read from JSON.
#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct CliConfig {
    /// Where the namespace and device stores persist between invocations.
    #[serde(default)]
    pub state_dir: Option<std::path::PathBuf>,
    /// Identity commands run as; defaults to the first device.
    #[serde(default)]
    pub caller: Option<Guid>,
    /// Cluster to create when the state directory is empty.
    #[serde(default)]
    pub setup: Option<crate::engine::EngineSetup>,
}

impl CliConfig {
    pub fn from_json(text: &str) -> Result<Self, EngineError> {
        serde_json::from_str(text).map_err(|e| EngineError::InvalidParameters(format!("config: {e}")))
    }
}

/// Five fully connected desk devices.
pub fn default_setup() -> crate::engine::EngineSetup {
    let devices = (1..=5)
        .map(|i| crate::types::DeviceProfile::new(Guid::synthetic(&format!("device{i}-")), 512.0, 600.0 - 60.0 * i as f64))
        .collect();
    crate::engine::EngineSetup::fully_connected(devices, crate::engine::EngineConfig::default())
}

/// Load the engine from `state_dir` if it holds one, else build it from the setup.
pub fn open_engine(config: &CliConfig, state_dir: &std::path::Path) -> Result<(StorageEngine, Guid), EngineError> {
    let engine = if state_dir.join("engine.json").exists() {
        StorageEngine::load(state_dir)?
    } else {
        StorageEngine::new(config.setup.clone().unwrap_or_else(default_setup))?
    };
    let caller = match &config.caller {
        Some(g) => g.clone(),
        None => engine.devices().into_iter().next().ok_or_else(|| EngineError::InvalidParameters("no devices".into()))?,
    };
    Ok((engine, caller))
}
