/**
 * Minimal ambient declarations for the extension APIs this project touches.
 * Narrower than the full @types/chrome surface on purpose: if code starts
 * using an API that is not listed here, the build fails and the new surface
 * has to be reviewed.
 */

declare namespace chrome {
  namespace webRequest {
    interface WebRequestDetails {
      url: string;
      timeStamp: number;
      tabId: number;
      initiator?: string;
    }
    interface WebRequestEvent {
      addListener(
        callback: (details: WebRequestDetails) => void,
        filter: { urls: string[] },
        extraInfoSpec?: string[],
      ): void;
    }
    const onBeforeRequest: WebRequestEvent;
  }

  namespace tabs {
    interface Tab {
      id?: number;
      url?: string;
    }
    function get(tabId: number): Promise<Tab>;
  }

  namespace cookies {
    interface Cookie {
      name: string;
      value: string;
      domain: string;
      session: boolean;
    }
    function getAll(details: Record<string, never>): Promise<Cookie[]>;
  }

  namespace action {
    function setBadgeText(details: { text: string }): Promise<void>;
    function setBadgeBackgroundColor(details: { color: string }): Promise<void>;
  }

  namespace storage {
    interface StorageArea {
      get(keys: string[] | string): Promise<Record<string, unknown>>;
      set(items: Record<string, unknown>): Promise<void>;
    }
    const local: StorageArea;
  }
}
