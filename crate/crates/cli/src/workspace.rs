//! On-disk layout of a workspace directory.
//!
//! ```text
//! workspace.json            config plus entropy and clock counters
//! server.json               full server state (registrations, groups, queues, ledger)
//! ledger.jsonl              ledger export, rewritten after every command
//! users/<id>.keys.jsonl     key store (private keys, mode 0600)
//! users/<id>.sessions.json  session book (mode 0600)
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ratchetlab_core::client::{Device, SessionBook};
use ratchetlab_core::crypto::Entropy;
use ratchetlab_core::key_store::{validate_user_id, KeyStore};
use ratchetlab_core::server::{write_ledger, Clock, ManualClock, Server, ServerState, SystemClock};
use ratchetlab_core::sim::SIM_START_MS;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const CONFIG_VERSION: u32 = 1;
/// Each command on a manual-clock workspace happens this long after the previous one.
pub const MANUAL_TICK_MS: u64 = 1_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ClockMode {
    System,
    Manual,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Config {
    pub version: u32,
    pub clock: ClockMode,
    /// Present only for reproducible workspaces. Keys drawn from it are not secret.
    pub seed: Option<u64>,
    /// Commands run so far; mixes into the seeded entropy stream.
    pub commands: u64,
    pub manual_now_ms: u64,
}

pub struct Workspace {
    root: PathBuf,
    pub config: Config,
}

fn write_atomic(path: &Path, bytes: &[u8], private: bool) -> Result<(), CliError> {
    let tmp = path.with_extension("tmp");
    {
        let mut opts = fs::OpenOptions::new();
        opts.write(true).create(true).truncate(true);
        #[cfg(unix)]
        if private {
            use std::os::unix::fs::OpenOptionsExt;
            opts.mode(0o600);
        }
        #[cfg(not(unix))]
        let _ = private;
        let mut f = opts.open(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

impl Workspace {
    pub fn init(root: &Path, clock: ClockMode, seed: Option<u64>) -> Result<Self, CliError> {
        if root.join("workspace.json").exists() {
            return Err(CliError::Usage(format!("{} is already a workspace", root.display())));
        }
        fs::create_dir_all(root.join("users"))?;
        let ws = Self {
            root: root.to_path_buf(),
            config: Config { version: CONFIG_VERSION, clock, seed, commands: 0, manual_now_ms: SIM_START_MS },
        };
        ws.save_server(&Server::new(ManualClock::new(0)))?;
        ws.save_config()?;
        Ok(ws)
    }

    /// Opens an existing workspace and counts this invocation as one command.
    pub fn open(root: &Path) -> Result<Self, CliError> {
        let path = root.join("workspace.json");
        if !path.exists() {
            return Err(CliError::Usage(format!("{} is not a workspace; run `init` first", root.display())));
        }
        let mut config: Config =
            serde_json::from_slice(&fs::read(&path)?).map_err(|e| CliError::Corrupt(path.clone(), e.to_string()))?;
        if config.version != CONFIG_VERSION {
            return Err(CliError::Corrupt(path, format!("unsupported version {}", config.version)));
        }
        config.commands += 1;
        config.manual_now_ms += MANUAL_TICK_MS;
        Ok(Self { root: root.to_path_buf(), config })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn save_config(&self) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(&self.config).expect("config serializes");
        text.push('\n');
        write_atomic(&self.path("workspace.json"), text.as_bytes(), false)
    }

    pub fn entropy(&self) -> Entropy {
        match self.config.seed {
            Some(seed) => Entropy::insecure_seeded(seed ^ self.config.commands.wrapping_mul(0x9e37_79b9_7f4a_7c15)),
            None => Entropy::os(),
        }
    }

    pub fn clock(&self) -> Box<dyn Clock> {
        match self.config.clock {
            ClockMode::System => Box::new(SystemClock),
            ClockMode::Manual => Box::new(ManualClock::new(self.config.manual_now_ms)),
        }
    }

    pub fn now_ms(&self) -> u64 {
        self.clock().now_ms()
    }

    pub fn load_server(&self) -> Result<Server, CliError> {
        let path = self.path("server.json");
        let state: ServerState = serde_json::from_slice(&fs::read(&path)?).map_err(|e| CliError::Corrupt(path, e.to_string()))?;
        Ok(Server::from_state(state, self.clock()))
    }

    pub fn save_server(&self, server: &Server) -> Result<(), CliError> {
        let state = server.snapshot();
        write_atomic(&self.path("server.json"), &serde_json::to_vec(&state).expect("state serializes"), false)?;
        write_ledger(&self.path("ledger.jsonl"), &state.ledger)?;
        Ok(())
    }

    fn user_file(&self, user_id: &str, suffix: &str) -> Result<PathBuf, CliError> {
        validate_user_id(user_id).map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(self.root.join("users").join(format!("{user_id}.{suffix}")))
    }

    pub fn has_user(&self, user_id: &str) -> Result<bool, CliError> {
        Ok(self.user_file(user_id, "keys.jsonl")?.exists())
    }

    pub fn load_device(&self, user_id: &str) -> Result<Device, CliError> {
        let keys = self.user_file(user_id, "keys.jsonl")?;
        if !keys.exists() {
            return Err(CliError::Usage(format!("no local user {user_id}; run `user-add` first")));
        }
        let store = KeyStore::load(&keys)?;
        let sessions = self.user_file(user_id, "sessions.json")?;
        let book = if sessions.exists() {
            serde_json::from_slice::<SessionBook>(&fs::read(&sessions)?)
                .map_err(|e| CliError::Corrupt(sessions, e.to_string()))?
        } else {
            SessionBook::default()
        };
        Ok(Device::with_sessions(store, book))
    }

    pub fn save_device(&self, device: &Device) -> Result<(), CliError> {
        device.store.save(&self.user_file(device.user_id(), "keys.jsonl")?)?;
        let book = serde_json::to_vec(&device.book).expect("sessions serialize");
        write_atomic(&self.user_file(device.user_id(), "sessions.json")?, &book, true)
    }

    pub fn remove_sessions(&self, user_id: &str) -> Result<(), CliError> {
        let path = self.user_file(user_id, "sessions.json")?;
        if path.exists() {
            fs::remove_file(path)?;
        }
        Ok(())
    }
}

/// Full device state, as an attacker who seized the phone would have it.
#[derive(Serialize, Deserialize)]
pub struct CompromiseDump {
    pub user_id: String,
    pub key_store: String,
    pub sessions: SessionBook,
}

impl CompromiseDump {
    pub fn of(device: &Device) -> Self {
        Self { user_id: device.user_id().to_string(), key_store: device.store.to_jsonl(), sessions: device.book.clone() }
    }

    pub fn into_device(self) -> Result<Device, CliError> {
        Ok(Device::with_sessions(KeyStore::from_jsonl(&self.key_store)?, self.sessions))
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        write_atomic(path, &serde_json::to_vec_pretty(self).expect("dump serializes"), true)
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        serde_json::from_slice(&fs::read(path)?).map_err(|e| CliError::Corrupt(path.to_path_buf(), e.to_string()))
    }
}

/// Captured traffic: repeated `len: u32 BE | envelope bytes`.
pub fn append_capture(path: &Path, envelopes: &[Vec<u8>]) -> Result<(), CliError> {
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    for e in envelopes {
        f.write_all(&(e.len() as u32).to_be_bytes())?;
        f.write_all(e)?;
    }
    Ok(())
}

pub fn read_capture(path: &Path) -> Result<Vec<Vec<u8>>, CliError> {
    let bytes = fs::read(path)?;
    let mut rest = bytes.as_slice();
    let mut out = Vec::new();
    while !rest.is_empty() {
        if rest.len() < 4 {
            return Err(CliError::Corrupt(path.to_path_buf(), "truncated length prefix".into()));
        }
        let len = u32::from_be_bytes(rest[..4].try_into().expect("4 bytes")) as usize;
        if rest.len() - 4 < len {
            return Err(CliError::Corrupt(path.to_path_buf(), "truncated envelope".into()));
        }
        out.push(rest[4..4 + len].to_vec());
        rest = &rest[4 + len..];
    }
    Ok(out)
}
