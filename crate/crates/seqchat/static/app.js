"use strict";

const log = document.getElementById("log");
const form = document.getElementById("form");
const input = document.getElementById("text");
const button = document.getElementById("send");
const status = document.getElementById("status");
const session = Math.random().toString(36).slice(2);
let waiting = false;

function bubble(author, text, extra) {
  const li = document.createElement("li");
  li.className = author + (extra ? " " + extra : "");
  li.textContent = text;
  log.appendChild(li);
  li.scrollIntoView({ block: "end" });
  return li;
}

function setWaiting(on) {
  waiting = on;
  button.disabled = on;
}

async function send(text) {
  setWaiting(true);
  const pending = bubble("bot", "…", "pending");
  try {
    const res = await fetch("api/reply", {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ text, session_id: session }),
    });
    if (!res.ok) throw new Error("service answered " + res.status);
    const body = await res.json();
    pending.remove();
    bubble("bot", body.reply);
  } catch (err) {
    pending.remove();
    const li = bubble("bot", "Could not reach the bot (" + err.message + "). ", "error");
    const retry = document.createElement("button");
    retry.type = "button";
    retry.textContent = "Retry";
    retry.onclick = () => {
      if (waiting) return;
      li.remove();
      send(text);
    };
    li.appendChild(retry);
  } finally {
    setWaiting(false);
    input.focus();
  }
}

form.addEventListener("submit", (ev) => {
  ev.preventDefault();
  const text = input.value.trim();
  if (!text || waiting) return;
  input.value = "";
  bubble("human", text);
  send(text);
});

fetch("api/health")
  .then((r) => r.json())
  .then((h) => {
    status.textContent = h.status === "ok" ? "vocabulary " + h.vocab_size + ", beam " + h.beam_width : "no model";
  })
  .catch(() => {
    status.textContent = "offline";
  });
