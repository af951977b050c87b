/* Keyboard-interactive authentication, reduced to the response counting
 * logic. A client announces how many answers it sends; the daemon sizes
 * its answer table from that count. */

struct authctxt {
    int32_t valid;
    uint32_t failures;
};

struct authctxt the_authctxt = { 1, 0 };
uint64_t requests_served = 0;

/* Sizes the answer table and reports whether the count was accepted. */
int32_t input_userauth_info_response(uint32_t nresp) {
    uint32_t size = nresp * 4;
    if (size < nresp) {
        trace("overflow: %u answers fit in %u bytes", nresp, size);
        return -1;
    }
    trace("info response: %u answers", nresp);
    return 0;
}

int32_t (*dispatch_info_response)(uint32_t) = input_userauth_info_response;

int32_t ping(uint32_t token) {
    emit(token);
    return 0;
}

/* Built without PAM: kind 2 takes the plain response path. */
int32_t handle_request(int32_t kind, uint32_t nresp) {
    int32_t rc = 0;
    requests_served++;
    if (kind == 0) {
        return ping(nresp);
    }
    if (kind == 1 || kind == 3) {
        rc = dispatch_info_response(nresp);
    }
    if (kind == 2 || kind == 3) {
        rc = rc + input_userauth_info_response(nresp);
    }
    if (rc < 0) {
        the_authctxt.failures++;
    }
    return rc;
}

/* Request entry for hosted runs: waits for the client, then serves. */
int32_t serve(int32_t kind, uint32_t nresp) {
    sleep(20000);
    return handle_request(kind, nresp);
}
