// Browser wiring: connect form, meter face (rotary dial + display), group
// roster and chat, all rendered from one ConsoleModel.

import { ConsoleSession } from "./session.js";
import { DIAL_TABLE } from "./protocol.js";

const $ = <T extends HTMLElement>(id: string): T =>
  document.getElementById(id) as T;

const session = new ConsoleSession({ onChange: render });
const model = session.model;

// --- dial face ---------------------------------------------------------------

const DIAL_RADIUS = 92;
const FACE_CENTER = 110;

function dialAngle(ordinal: number): number {
  // 12 positions around the face, position 0 at the top.
  return (ordinal * 30 - 90) * (Math.PI / 180);
}

function buildDial(): void {
  const svg = $("dial-svg");
  let marks = "";
  for (const range of DIAL_TABLE) {
    const a = dialAngle(range.ordinal);
    const x = FACE_CENTER + Math.cos(a) * DIAL_RADIUS;
    const y = FACE_CENTER + Math.sin(a) * DIAL_RADIUS;
    marks += `
      <g class="dial-stop" data-ordinal="${range.ordinal}">
        <circle cx="${x.toFixed(1)}" cy="${y.toFixed(1)}" r="13"></circle>
        <text x="${x.toFixed(1)}" y="${(y + 3.5).toFixed(1)}">${range.label}</text>
      </g>`;
  }
  svg.innerHTML = `
    <circle class="dial-face" cx="${FACE_CENTER}" cy="${FACE_CENTER}" r="64"></circle>
    ${marks}
    <line id="dial-pointer" class="dial-pointer"
          x1="${FACE_CENTER}" y1="${FACE_CENTER}" x2="${FACE_CENTER}" y2="${FACE_CENTER - 56}"></line>`;
  svg.querySelectorAll<SVGGElement>(".dial-stop").forEach((stop) => {
    stop.addEventListener("click", () => {
      if (session.joined) {
        session.turnDial(Number(stop.dataset.ordinal));
      }
    });
  });
}

// --- rendering ------------------------------------------------------------------

let renderedChatLines = 0;

function render(): void {
  const joined = session.joined;
  $("connect-form").classList.toggle("hidden", joined);
  $("workbench").classList.toggle("hidden", !joined);

  const banner = $("banner");
  banner.textContent = model.banner;
  banner.classList.toggle("hidden", model.banner === "");

  if (!joined && model.status !== "closed") {
    renderedChatLines = 0;
    return;
  }

  const display = model.displayState;
  $("lcd").textContent = model.displayText === "" ? " " : model.displayText;
  $("lcd").classList.toggle("off", !display.power);
  $("range-label").textContent = DIAL_TABLE[display.dial].label;
  ($("power-switch") as HTMLButtonElement).textContent =
    display.power ? "power: on" : "power: off";

  const pointer = document.getElementById("dial-pointer");
  if (pointer) {
    const a = dialAngle(display.dial);
    pointer.setAttribute("x2", String(FACE_CENTER + Math.cos(a) * 56));
    pointer.setAttribute("y2", String(FACE_CENTER + Math.sin(a) * 56));
    pointer.classList.toggle("pending", model.hasPending);
  }

  $("provenance").textContent =
    model.lastReadingOrigin === null
      ? ""
      : `measured by ${model.nameOf(model.lastReadingOrigin)}`;

  const roster = $("roster");
  roster.innerHTML = "";
  for (const member of model.roster) {
    const li = document.createElement("li");
    li.textContent = member.name;
    if (member.id === model.userId) {
      li.classList.add("self");
    }
    roster.appendChild(li);
  }

  const pane = $("chat-pane");
  for (; renderedChatLines < model.chat.length; renderedChatLines++) {
    const line = model.chat[renderedChatLines];
    const div = document.createElement("div");
    div.className = line.own ? "chat-line own" : "chat-line";
    const who = document.createElement("span");
    who.className = "chat-who";
    who.textContent = line.name;
    div.appendChild(who);
    div.appendChild(document.createTextNode(line.text));
    pane.appendChild(div);
  }
  pane.scrollTop = pane.scrollHeight;

  const input = $("chat-input") as HTMLInputElement;
  ($("chat-send") as HTMLButtonElement).disabled = input.value.trim() === "";
}

// --- event hookup -------------------------------------------------------------------

function connect(): void {
  const host = ($("host") as HTMLInputElement).value.trim() || "127.0.0.1";
  const port = Number(($("port") as HTMLInputElement).value) || 7422;
  const user = Number(($("user") as HTMLInputElement).value);
  const group = Number(($("group") as HTMLInputElement).value);
  const name = ($("name") as HTMLInputElement).value.trim() || `user${user}`;
  session.join(host, port, user, group, name).catch(() => render());
}

function sendChat(): void {
  const input = $("chat-input") as HTMLInputElement;
  const text = input.value.trim();
  if (text !== "" && session.joined) {
    session.sendChat(text);
    input.value = "";
    render();
  }
}

buildDial();
$("connect").addEventListener("click", connect);
$("connect-form").addEventListener("keydown", (ev) => {
  if ((ev as KeyboardEvent).key === "Enter") {
    connect();
  }
});
$("power-switch").addEventListener("click", () => {
  if (session.joined) {
    session.setPower(!model.displayState.power);
  }
});
$("chat-send").addEventListener("click", sendChat);
$("chat-input").addEventListener("keydown", (ev) => {
  if ((ev as KeyboardEvent).key === "Enter") {
    sendChat();
  }
});
$("chat-input").addEventListener("input", render);
render();
