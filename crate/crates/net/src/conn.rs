//! Envelope framing over byte streams.

use log::{debug, warn};
use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt};
use tokio::sync::mpsc;
use tokio::task::JoinHandle;

use tilewall::protocol::{encode, Message, ProtocolError, Sequencer, StreamDecoder};

use crate::NetError;

/// Reads whole messages from a stream.
pub struct FramedReader<R> {
    inner: R,
    decoder: StreamDecoder,
    buf: Vec<u8>,
}

impl<R: AsyncRead + Unpin> FramedReader<R> {
    pub fn new(inner: R) -> Self {
        FramedReader {
            inner,
            decoder: StreamDecoder::new(),
            buf: vec![0; 64 * 1024],
        }
    }

    /// Next message with its envelope sequence. `Ok(None)` on clean EOF.
    /// Unknown message types and malformed payloads are skipped; framing
    /// errors end the stream.
    pub async fn next(&mut self) -> Result<Option<(u64, Message)>, NetError> {
        loop {
            while let Some(env) = self.decoder.next_envelope()? {
                match Message::from_envelope(&env) {
                    Ok(msg) => return Ok(Some((env.sequence, msg))),
                    Err(e @ ProtocolError::UnknownType(_)) => debug!("skipping: {e}"),
                    Err(e) if e.is_fatal() => return Err(e.into()),
                    Err(e) => warn!("dropping malformed message: {e}"),
                }
            }
            let n = self.inner.read(&mut self.buf).await?;
            if n == 0 {
                return if self.decoder.buffered() == 0 {
                    Ok(None)
                } else {
                    Err(NetError::Closed)
                };
            }
            self.decoder.push(&self.buf[..n]);
        }
    }
}

/// Writes messages, numbering everything except frames (which carry the
/// source's own sequence).
pub struct FramedWriter<W> {
    inner: W,
    sequencer: Sequencer,
}

impl<W: AsyncWrite + Unpin> FramedWriter<W> {
    pub fn new(inner: W) -> Self {
        FramedWriter {
            inner,
            sequencer: Sequencer::default(),
        }
    }

    pub async fn send(&mut self, msg: &Message, seq: Option<u64>) -> Result<(), NetError> {
        let seq = seq.unwrap_or_else(|| self.sequencer.next(msg.content_id(), msg.channel()));
        let bytes = encode(&msg.to_envelope(seq)?)?;
        self.inner.write_all(&bytes).await?;
        Ok(())
    }

    pub async fn shutdown(&mut self) -> Result<(), NetError> {
        self.inner.flush().await?;
        self.inner.shutdown().await?;
        Ok(())
    }
}

pub enum Outbound {
    Msg(Message, Option<u64>),
    Close,
}

/// Spawns a task draining `rx` into `w`. The task ends on `Close`, when all
/// senders are gone, or on a write error.
pub fn spawn_writer<W>(w: W, mut rx: mpsc::UnboundedReceiver<Outbound>) -> JoinHandle<()>
where
    W: AsyncWrite + Unpin + Send + 'static,
{
    tokio::spawn(async move {
        let mut writer = FramedWriter::new(w);
        while let Some(out) = rx.recv().await {
            match out {
                Outbound::Msg(msg, seq) => {
                    if let Err(e) = writer.send(&msg, seq).await {
                        debug!("writer stopped: {e}");
                        return;
                    }
                }
                Outbound::Close => break,
            }
        }
        let _ = writer.shutdown().await;
    })
}
