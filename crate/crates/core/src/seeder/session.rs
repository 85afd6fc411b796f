//! Per-connection reader and writer tasks.

use std::collections::VecDeque;
use std::os::fd::RawFd;
use std::sync::atomic::Ordering;
use std::sync::Arc;

use crate::error::RtError;
use crate::hybrid::{send_file_chunk, FileRegion};
use crate::io::{read_lazy, write_all, ReadOutcome};
use crate::loopcell::LoopCell;
use crate::runtime::spawn;
use crate::sync::{with_timeout, CondVar, TimeoutOutcome};

use super::choke::{ChokeTarget, SessionId};
use super::wire::{
    self, FrameDecoder, Message, HANDSHAKE_LEN, MAX_REQUEST_LEN,
};
use super::SeederShared;

/// Bytes asked of the socket per reader wakeup. Client frames are tiny;
/// this mostly bounds the lazily allocated buffer.
const READ_CHUNK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ChunkRequest {
    pub index: u32,
    pub begin: u32,
    pub length: u32,
}

pub(crate) struct SessionState {
    pub choked: bool,
    pub closing: bool,
    pub interested: bool,
    /// Choke transitions waiting to be written; they always jump ahead of
    /// queued chunks.
    pub control: VecDeque<bool>,
    pub chunks: VecDeque<ChunkRequest>,
}

impl SessionState {
    fn new() -> Self {
        SessionState {
            choked: true,
            closing: false,
            interested: false,
            control: VecDeque::new(),
            chunks: VecDeque::new(),
        }
    }
}

pub(crate) struct PeerSession {
    pub id: SessionId,
    pub fd: RawFd,
    pub state: LoopCell<SessionState>,
    pub writer_cv: CondVar,
}

impl ChokeTarget for Arc<PeerSession> {
    fn deliver(&self, choked: bool) {
        let closing = self.state.with(|st| {
            if st.closing {
                return true;
            }
            st.choked = choked;
            st.control.push_back(choked);
            if choked {
                // Queued chunks are dropped on choke, mirroring how fresh
                // requests from a choked peer are dropped. The peer is
                // expected to re-request once unchoked, so serving stale
                // queue entries would only produce duplicate pieces.
                st.chunks.clear();
            }
            false
        });
        if !closing {
            let _ = self.writer_cv.signal();
        }
    }
}

fn shutdown_fd(fd: RawFd) {
    unsafe {
        libc::shutdown(fd, libc::SHUT_RDWR);
    }
}

fn protocol_error(err: wire::WireError) -> RtError {
    RtError::Io(std::io::Error::new(std::io::ErrorKind::InvalidData, err))
}

/// Runs one peer connection start to finish, then unregisters and closes it.
pub(crate) async fn run_session(shared: Arc<SeederShared>, id: SessionId, fd: RawFd) {
    if let Err(e) = session_main(&shared, id, fd).await {
        log::debug!("session {id}: {e}");
    }
    shared.sessions.with(|t| t.entries.remove(&id));
    // The writer joined inside session_main, so nothing references the
    // descriptor anymore and closing it cannot race a late write.
    unsafe {
        libc::close(fd);
    }
}

async fn session_main(shared: &Arc<SeederShared>, id: SessionId, fd: RawFd) -> Result<(), RtError> {
    if !exchange_handshake(shared, fd).await? {
        return Ok(());
    }

    let session = Arc::new(PeerSession {
        id,
        fd,
        state: LoopCell::new(SessionState::new()),
        writer_cv: CondVar::new(),
    });
    shared.counters.sessions_opened.fetch_add(1, Ordering::Relaxed);
    shared.mgr.with(|m| m.add(id, session.clone()));

    let writer = spawn(writer_task(shared.clone(), session.clone()))?;
    let result = reader_loop(shared, &session, fd).await;

    session.state.with(|st| st.closing = true);
    let _ = session.writer_cv.signal();
    shared.mgr.with(|m| m.remove(id));
    writer.join().await?;
    shared.counters.sessions_closed.fetch_add(1, Ordering::Relaxed);
    result
}

/// Reads the peer's 54-byte handshake, validates it against the served
/// content, and answers with ours. False means "close quietly": a malformed
/// or mismatched handshake, or a peer that never finished one.
async fn exchange_handshake(shared: &SeederShared, fd: RawFd) -> Result<bool, RtError> {
    let mut buf = Vec::with_capacity(HANDSHAKE_LEN);
    while buf.len() < HANDSHAKE_LEN {
        let needed = HANDSHAKE_LEN - buf.len();
        let outcome = with_timeout(shared.config.handshake_timeout, |token| async move {
            read_lazy(fd, needed, Some(&token)).await
        })
        .await?;
        match outcome {
            TimeoutOutcome::TimedOut => return Ok(false),
            TimeoutOutcome::Completed(Ok(ReadOutcome::Data(bytes))) => {
                buf.extend_from_slice(&bytes)
            }
            TimeoutOutcome::Completed(Ok(_)) => return Ok(false),
            TimeoutOutcome::Completed(Err(e)) => return Err(e),
        }
    }
    let bytes: &[u8; HANDSHAKE_LEN] = buf[..HANDSHAKE_LEN].try_into().expect("sized above");
    let Ok(hs) = wire::decode_handshake(bytes) else {
        return Ok(false);
    };
    if hs.info_hash != shared.store.info_hash() {
        return Ok(false);
    }
    let reply = wire::encode_handshake(&shared.store.info_hash(), &shared.config.peer_id);
    write_all(fd, &reply).await?;
    Ok(true)
}

async fn reader_loop(
    shared: &Arc<SeederShared>,
    session: &Arc<PeerSession>,
    fd: RawFd,
) -> Result<(), RtError> {
    let mut dec = FrameDecoder::new();
    loop {
        if shared.stop.load(Ordering::SeqCst) {
            return Ok(());
        }
        let outcome = with_timeout(shared.config.idle_timeout, |token| async move {
            read_lazy(fd, READ_CHUNK, Some(&token)).await
        })
        .await?;
        let data = match outcome {
            TimeoutOutcome::TimedOut => {
                shared
                    .counters
                    .idle_disconnects
                    .fetch_add(1, Ordering::Relaxed);
                return Ok(());
            }
            TimeoutOutcome::Completed(Ok(ReadOutcome::Data(d))) => d,
            TimeoutOutcome::Completed(Ok(_)) => return Ok(()),
            TimeoutOutcome::Completed(Err(e)) => return Err(e),
        };
        dec.push(&data);
        while let Some(msg) = dec.next_frame().map_err(protocol_error)? {
            handle_message(shared, session, msg)?;
        }
    }
}

/// Applies one inbound frame to the session. Deliberately synchronous: the
/// whole batch of frames from one read is handled atomically with respect
/// to every other task.
fn handle_message(
    shared: &SeederShared,
    session: &Arc<PeerSession>,
    msg: Message,
) -> Result<(), RtError> {
    match msg {
        Message::KeepAlive => {}
        Message::Interested => session.state.with(|st| st.interested = true),
        Message::NotInterested => session.state.with(|st| st.interested = false),
        Message::Request {
            index,
            begin,
            length,
        } => {
            if session.state.with(|st| st.choked) {
                // Requests sent while choked are dropped, not answered.
                shared
                    .counters
                    .requests_dropped_choked
                    .fetch_add(1, Ordering::Relaxed);
                return Ok(());
            }
            if length == 0 || length > MAX_REQUEST_LEN {
                return Err(RtError::Io(std::io::Error::new(
                    std::io::ErrorKind::InvalidData,
                    format!("request length {length} out of range"),
                )));
            }
            let offset =
                index as u64 * shared.store.piece_length() as u64 + begin as u64;
            // Validate bounds now so the writer can serve without rechecking.
            FileRegion::new(shared.store.clone(), offset, length as usize).map_err(|e| {
                RtError::Io(std::io::Error::new(std::io::ErrorKind::InvalidData, e))
            })?;
            session.state.with(|st| {
                st.chunks.push_back(ChunkRequest {
                    index,
                    begin,
                    length,
                })
            });
            let _ = session.writer_cv.signal();
        }
        // A seeder never downloads; tolerate these rather than tearing the
        // connection down over them.
        Message::Choke | Message::Unchoke | Message::Piece { .. } => {
            log::debug!("session {}: ignoring leecher-side frame", session.id);
        }
    }
    Ok(())
}

enum Work {
    Control(bool),
    Chunk(ChunkRequest),
    Wait,
    Exit,
}

async fn writer_task(shared: Arc<SeederShared>, session: Arc<PeerSession>) -> Result<(), RtError> {
    let fd = session.fd;
    loop {
        let work = session.state.with(|st| {
            if let Some(choked) = st.control.pop_front() {
                Work::Control(choked)
            } else if !st.choked && !st.chunks.is_empty() {
                Work::Chunk(st.chunks.pop_front().expect("checked nonempty"))
            } else if st.closing {
                Work::Exit
            } else {
                Work::Wait
            }
        });
        match work {
            Work::Exit => break,
            Work::Wait => session.writer_cv.wait().await?,
            Work::Control(choked) => {
                let msg = if choked {
                    Message::Choke
                } else {
                    Message::Unchoke
                };
                if write_all(fd, &wire::encode_to_vec(&msg)).await.is_err() {
                    shutdown_fd(fd);
                    break;
                }
            }
            Work::Chunk(req) => {
                let offset =
                    req.index as u64 * shared.store.piece_length() as u64 + req.begin as u64;
                let region = FileRegion::new(shared.store.clone(), offset, req.length as usize)
                    .expect("bounds validated when the request was accepted");
                let header = wire::piece_header(req.index, req.begin, region.len());
                let sent = async {
                    write_all(fd, &header).await?;
                    send_file_chunk(fd, &region, shared.oracle.as_ref()).await
                };
                match sent.await {
                    Ok(_path) => {
                        shared
                            .counters
                            .requests_served
                            .fetch_add(1, Ordering::Relaxed);
                        shared
                            .counters
                            .bytes_sent
                            .fetch_add(header.len() as u64 + region.len() as u64, Ordering::Relaxed);
                    }
                    Err(_) => {
                        // Wake the reader so the session tears down.
                        shutdown_fd(fd);
                        break;
                    }
                }
            }
        }
    }
    Ok(())
}
