#include <stdio.h>
#include <string.h>

#include "distillrag.h"

static const char *DB =
    "[{\"id\":\"1\",\"generic_name\":\"Ibuprofen\",\"brand_names\":[\"Advil\"],"
    "\"attributes\":{\"dosage\":\"Dosage: 200-400 mg.\"}},"
    "{\"id\":\"2\",\"generic_name\":\"Warfarin\","
    "\"attributes\":{\"dosage\":\"Dosage: by INR.\"}}]";

int main(void) {
    DrIndex *idx = NULL;
    if (dr_index_open_json(DB, 256, &idx) != DR_STATUS_OK) {
        fprintf(stderr, "open: %s\n", dr_last_error());
        return 1;
    }
    size_t entities = 0, items = 0;
    dr_index_stats(idx, &entities, &items);
    char *json = NULL;
    if (dr_index_search(idx, "advil", DR_GRANULARITY_COARSE, 1, &json) != DR_STATUS_OK) {
        return 2;
    }
    printf("%zu %zu %s\n", entities, items, json);
    dr_string_free(json);
    dr_index_free(idx);

    char *query = NULL;
    if (dr_parse_tool_call("search_engine(warfarin dosage)", &query) != DR_STATUS_OK) {
        return 3;
    }
    printf("%s\n", query);
    dr_string_free(query);
    if (dr_parse_tool_call("nothing", &query) != DR_STATUS_NO_TOOL_CALL) {
        return 4;
    }
    printf("%.6f\n", dr_elo_expected(1000.0, 1400.0));
    return 0;
}
