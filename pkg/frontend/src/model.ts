// Console view-model: the mirrored session state every widget renders from.
// Pure folds over envelopes; no DOM, no sockets (so it runs under node:test).

import {
  ControlBody,
  DEFAULT_STATE,
  Envelope,
  MeterState,
  RosterBody,
  RosterEntry,
  applyControl,
  applyReading,
  stateDisplay,
} from "./protocol.js";

export interface ChatLine {
  origin: number;
  name: string;
  text: string;
  seq: number;
  own: boolean;
}

export type ConsoleStatus = "idle" | "connecting" | "joined" | "error" | "closed";

export class ConsoleModel {
  userId = 0;
  status: ConsoleStatus = "idle";
  banner = "";
  roster: RosterEntry[] = [];
  chat: ChatLine[] = [];
  lastSeq = 0;
  lastReadingOrigin: number | null = null;
  state: MeterState = { ...DEFAULT_STATE };
  pending: ControlBody[] = [];

  nameOf(id: number): string {
    const entry = this.roster.find((m) => m.id === id);
    return entry ? entry.name : `#${id}`;
  }

  // Authoritative state plus unconfirmed local controls: what the dial and
  // display actually render, with a pending affordance until the echo.
  get displayState(): MeterState {
    let state = this.state;
    for (const p of this.pending) {
      state = applyControl(state, p);
    }
    return state;
  }

  get displayText(): string {
    return stateDisplay(this.displayState);
  }

  get hasPending(): boolean {
    return this.pending.length > 0;
  }

  optimistic(body: ControlBody): void {
    this.pending.push(body);
  }

  adoptAck(env: Envelope): void {
    const block = env.body as RosterBody;
    this.roster = block.members;
    this.lastSeq = env.seq;
    this.state = {
      dial: block.dial,
      power: block.power,
      overload: block.overload,
      valueMicro: block.last_value_micro,
    };
    this.status = "joined";
    this.banner = "";
  }

  // Fold one relayed envelope; returns false when the envelope was not a
  // state/chat/roster change (PONG and friends).
  applyEnvelope(env: Envelope): boolean {
    switch (env.kind) {
      case "RELAY_CONTROL": {
        const body = env.body as ControlBody;
        this.lastSeq = env.seq;
        this.state = applyControl(this.state, body);
        if (env.origin === this.userId) {
          const i = this.pending.findIndex(
            (p) => p.code === body.code && p.value === body.value,
          );
          if (i >= 0) {
            this.pending.splice(i, 1);
          }
        }
        return true;
      }
      case "RELAY_MEASUREMENT": {
        this.lastSeq = env.seq;
        this.state = applyReading(this.state, env.body as never);
        this.lastReadingOrigin = env.origin;
        return true;
      }
      case "RELAY_CHAT": {
        const body = env.body as { text: string };
        this.lastSeq = env.seq;
        this.chat.push({
          origin: env.origin,
          name: this.nameOf(env.origin),
          text: body.text,
          seq: env.seq,
          own: env.origin === this.userId,
        });
        return true;
      }
      case "ROSTER_UPDATE": {
        this.roster = (env.body as RosterBody).members;
        return true;
      }
      case "ERROR": {
        const body = env.body as { code: string; detail: string };
        this.status = "error";
        this.banner =
          body.code === "DUPLICATE_USER" ? "user already connected" : body.detail;
        return true;
      }
      default:
        return false;
    }
  }
}
