/** Browser entry point: instruction screen, AB player, progress, completion. */

import { ListenApi } from './api.js';
import type { ComparisonView } from './comparison.js';
import { SessionController } from './session.js';

const INSTRUCTIONS = `
You will hear a reference mix and two processed versions, A and B.
Each comparison asks about one instrument: either its extraction
(the isolated instrument) or its removal (the mix without it).
Switch between A and B as often as you like; playback keeps its position
so you can compare the same moment. Pick whichever sounds better to you.
Use the best audio equipment available to you.`;

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  text = '',
  className = '',
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  if (text) node.textContent = text;
  if (className) node.className = className;
  return node;
}

class Page {
  private root: HTMLElement;

  constructor(root: HTMLElement) {
    this.root = root;
  }

  private clear(): HTMLElement {
    this.root.replaceChildren();
    return this.root;
  }

  showStart(onBegin: (assessor: string, category: string, equipment: string) => void): void {
    const root = this.clear();
    root.append(el('h1', 'Listening test'));
    root.append(el('pre', INSTRUCTIONS.trim(), 'instructions'));
    const assessor = el('input');
    assessor.placeholder = 'your assessor id';
    const category = el('select');
    for (const value of ['Producer', 'MusicianEducator']) {
      const option = el('option', value);
      option.value = value;
      category.append(option);
    }
    const equipment = el('input');
    equipment.placeholder = 'playback equipment (optional)';
    const begin = el('button', 'Begin');
    begin.onclick = () => {
      if (assessor.value.trim()) {
        onBegin(assessor.value.trim(), category.value, equipment.value.trim());
      }
    };
    root.append(assessor, category, equipment, begin);
  }

  showComparison(
    view: ComparisonView,
    progress: { completed: number; required: number },
    onChoice: (choice: 'a' | 'b') => void,
  ): void {
    const root = this.clear();
    root.append(el('h2', `Comparison ${progress.completed + 1} of ${progress.required}`));
    root.append(
      el('p', `${view.payload.stimulus_kind} of ${view.payload.source}`, 'task'),
    );
    const playRow = el('div', '', 'play-row');
    for (const key of ['reference', 'a', 'b'] as const) {
      const button = el('button', key === 'reference' ? 'Reference' : key.toUpperCase());
      button.onclick = () => view.play(key);
      playRow.append(button);
    }
    const chooseRow = el('div', '', 'choose-row');
    for (const choice of ['a', 'b'] as const) {
      const button = el('button', `${choice.toUpperCase()} sounds better`);
      button.onclick = () => onChoice(choice);
      chooseRow.append(button);
    }
    root.append(playRow, chooseRow);
  }

  showCompletion(progress: { completed: number; required: number }): void {
    const root = this.clear();
    root.append(el('h2', 'All done'));
    root.append(
      el('p', `You completed ${progress.completed} of ${progress.required} comparisons. Thank you!`),
    );
  }

  showError(message: string): void {
    this.clear().append(el('p', message, 'error'));
  }
}

async function runSession(page: Page, controller: SessionController): Promise<void> {
  const view = await controller.next();
  if (view === null) {
    page.showCompletion(controller.progress);
    return;
  }
  page.showComparison(view, controller.progress, (choice) => {
    void controller
      .submit(view, choice)
      .then(() => runSession(page, controller))
      .catch((error: unknown) => page.showError(String(error)));
  });
}

export function mount(root: HTMLElement, baseUrl = ''): void {
  const page = new Page(root);
  const api = new ListenApi(baseUrl);
  const controller = new SessionController(api, (url) => {
    const audio = new Audio(url);
    audio.preload = 'auto';
    return audio;
  });
  page.showStart((assessor, category, equipment) => {
    void controller
      .start(assessor, category, equipment)
      .then(() => runSession(page, controller))
      .catch((error: unknown) => page.showError(String(error)));
  });
}

if (typeof document !== 'undefined') {
  const root = document.getElementById('app');
  if (root) mount(root);
}
