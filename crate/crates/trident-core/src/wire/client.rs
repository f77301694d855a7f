//! Simulated client device.
//!
//! A [`SimDevice`] carries the IMEI and IMSI it reports in every request; a
//! [`SimClient`] drives the protocol over any byte stream and records a
//! complete [`Transcript`] of raw frames in both directions.

use std::io::{Read, Write};

use crate::identity::{Imei, Imsi};

use super::{
    decode_message, encode_message, read_frame, Message, Transcript, WireDirection, WireError,
    OUTCOME_PROCEED,
};

/// A simulated handset: fixed device and subscriber identity plus a label
/// for harness output.
#[derive(Debug, Clone)]
pub struct SimDevice {
    pub imei: Imei,
    pub imsi: Imsi,
    pub label: String,
}

impl SimDevice {
    pub fn new(imei: Imei, imsi: Imsi, label: impl Into<String>) -> Self {
        Self {
            imei,
            imsi,
            label: label.into(),
        }
    }
}

/// Protocol driver for one login attempt over one connection.
pub struct SimClient<S: Read + Write> {
    stream: S,
    device: SimDevice,
    session_id: String,
    transcript: Transcript,
}

impl<S: Read + Write> SimClient<S> {
    pub fn new(stream: S, device: SimDevice, session_id: impl Into<String>) -> Self {
        Self {
            stream,
            device,
            session_id: session_id.into(),
            transcript: Transcript::default(),
        }
    }

    pub fn device(&self) -> &SimDevice {
        &self.device
    }

    pub fn transcript(&self) -> &Transcript {
        &self.transcript
    }

    pub fn into_transcript(self) -> Transcript {
        self.transcript
    }

    fn send(&mut self, message: &Message) -> Result<(), WireError> {
        let frame = encode_message(message)?;
        self.transcript
            .record(WireDirection::ClientToServer, frame.clone());
        self.stream.write_all(&frame)?;
        self.stream.flush()?;
        Ok(())
    }

    fn recv(&mut self) -> Result<Message, WireError> {
        let payload = read_frame(&mut self.stream)?.ok_or(WireError::ShortRead)?;
        let mut frame = (payload.len() as u32).to_be_bytes().to_vec();
        frame.extend_from_slice(&payload);
        self.transcript.record(WireDirection::ServerToClient, frame);
        decode_message(&payload)
    }

    /// Enter text into the login-name field: send `NAME`, await the gate's
    /// `RESULT`.
    pub fn submit_name(&mut self, credential: &str) -> Result<Message, WireError> {
        self.send(&Message::Name {
            session: self.session_id.clone(),
            credential: credential.to_owned(),
            imei: self.device.imei.as_str().to_owned(),
            imsi: self.device.imsi.as_str().to_owned(),
        })?;
        self.recv()
    }

    /// Enter text into the login-password field: send `PASSWORD`, await the
    /// gate `RESULT`, and when it proceeds also await the authentication
    /// point's follow-up (`TOKEN` or a deny `RESULT`).
    pub fn submit_password(&mut self, credential: &str) -> Result<Vec<Message>, WireError> {
        self.send(&Message::Password {
            session: self.session_id.clone(),
            credential: credential.to_owned(),
            imei: self.device.imei.as_str().to_owned(),
            imsi: self.device.imsi.as_str().to_owned(),
        })?;
        let first = self.recv()?;
        let proceeded = matches!(&first, Message::Result { outcome } if outcome == OUTCOME_PROCEED);
        let mut replies = vec![first];
        if proceeded {
            replies.push(self.recv()?);
        }
        Ok(replies)
    }

    /// Register an account over the wire.
    pub fn submit_registration(
        &mut self,
        name: &str,
        phone: Option<&str>,
        password: &str,
    ) -> Result<Message, WireError> {
        self.send(&Message::Register {
            session: self.session_id.clone(),
            name: name.to_owned(),
            phone: phone.map(str::to_owned),
            password: password.to_owned(),
            imei: self.device.imei.as_str().to_owned(),
            imsi: self.device.imsi.as_str().to_owned(),
        })?;
        self.recv()
    }
}
