import type { AudioClip } from '../src/audio.js';
import type { ComparisonPayload } from '../src/types.js';

export class MockClip implements AudioClip {
  currentTime = 0;
  playing = false;
  playCount = 0;

  constructor(readonly url: string = '') {}

  play(): void {
    this.playing = true;
    this.playCount += 1;
  }

  pause(): void {
    this.playing = false;
  }
}

export function payload(overrides: Partial<ComparisonPayload> = {}): ComparisonPayload {
  return {
    comparison_id: 'cmp0001',
    session_id: 'sess0001',
    source: 'vocals',
    stimulus_kind: 'extraction',
    reference: '/audio/ref',
    a: '/audio/aaa',
    b: '/audio/bbb',
    completed: 0,
    required: 72,
    ...overrides,
  };
}

/** Manually advanced clock for deterministic elapsed times. */
export class FakeClock {
  nowMs = 1_000_000;

  tick(ms: number): void {
    this.nowMs += ms;
  }

  fn = (): number => this.nowMs;
}
