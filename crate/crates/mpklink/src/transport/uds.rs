//! Single bidirectional Unix domain socket.
//!
//! The server binds `<base>.sock` (unlinking any stale file first), listens,
//! and accepts its one peer lazily on first use, so binding can happen on
//! the orchestrating thread before the server loop starts. The server
//! unlinks the socket file on close.

use std::os::unix::net::{UnixListener, UnixStream};
use std::path::PathBuf;

use crate::codec::Envelope;

use super::{read_frame, write_frame, Channel, ChannelConfig, ChannelError, Role};

enum State {
    Listening(UnixListener),
    Connected(UnixStream),
    Closed,
}

pub struct UdsChannel {
    state: State,
    /// Socket file to unlink on close (server role only).
    owned: Option<PathBuf>,
    max_message: usize,
}

pub fn open_uds(cfg: &ChannelConfig) -> Result<UdsChannel, ChannelError> {
    let path = {
        let mut s = cfg.base.as_os_str().to_os_string();
        s.push(".sock");
        PathBuf::from(s)
    };
    match cfg.role {
        Role::Server => {
            let _ = std::fs::remove_file(&path); // stale file from a previous run
            let listener = UnixListener::bind(&path)
                .map_err(|e| ChannelError::PathUnavailable(format!("{}: {e}", path.display())))?;
            Ok(UdsChannel {
                state: State::Listening(listener),
                owned: Some(path),
                max_message: cfg.max_message,
            })
        }
        Role::Client => match UnixStream::connect(&path) {
            Ok(stream) => Ok(UdsChannel { state: State::Connected(stream), owned: None, max_message: cfg.max_message }),
            Err(e)
                if matches!(
                    e.kind(),
                    std::io::ErrorKind::ConnectionRefused | std::io::ErrorKind::NotFound
                ) =>
            {
                Err(ChannelError::ConnectRefused(format!("{}: {e}", path.display())))
            }
            Err(e) => Err(e.into()),
        },
    }
}

impl UdsChannel {
    fn stream(&mut self) -> Result<&mut UnixStream, ChannelError> {
        if let State::Listening(_) = self.state {
            let listener = match std::mem::replace(&mut self.state, State::Closed) {
                State::Listening(l) => l,
                _ => unreachable!(),
            };
            let (stream, _) = listener.accept()?;
            self.state = State::Connected(stream);
        }
        match &mut self.state {
            State::Connected(s) => Ok(s),
            State::Closed => Err(ChannelError::PeerClosed),
            State::Listening(_) => unreachable!(),
        }
    }
}

impl Channel for UdsChannel {
    fn send(&mut self, envelope: &Envelope) -> Result<(), ChannelError> {
        write_frame(self.stream()?, envelope)
    }

    fn recv(&mut self) -> Result<Envelope, ChannelError> {
        let max = self.max_message;
        read_frame(self.stream()?, max)
    }

    fn close(&mut self) -> Result<(), ChannelError> {
        if let State::Connected(s) = &self.state {
            let _ = s.shutdown(std::net::Shutdown::Both);
        }
        self.state = State::Closed;
        if let Some(path) = self.owned.take() {
            let _ = std::fs::remove_file(path);
        }
        Ok(())
    }
}

impl Drop for UdsChannel {
    fn drop(&mut self) {
        let _ = self.close();
    }
}
