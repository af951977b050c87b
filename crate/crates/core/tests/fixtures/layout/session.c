struct session {
    int32_t uid;
    int32_t flags;
    uint32_t attempts;
};

struct session current = { 0, 0, 0 };

int32_t login(int32_t uid) {
    current.uid = uid;
    current.attempts++;
    return 0;
}

uint32_t attempts(void) {
    return current.attempts;
}
